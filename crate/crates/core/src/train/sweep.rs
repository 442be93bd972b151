use serde::{Deserialize, Serialize};

use super::metrics::{EpochMetrics, MetricsLog};
use super::{train_run, TrainConfig, TrainOutcome, CONVERGED_ACC};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::taskgen::{gen_dataset, split, Dataset};
use crate::vocab::Supervision;

/// How each sweep run builds its data; the run seed drives generation and split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub count: usize,
    pub n: usize,
    pub m: usize,
    pub supervision: Supervision,
    pub train_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            count: 4096,
            n: 20,
            m: 5,
            supervision: Supervision::Cot,
            train_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub converged: bool,
    pub converged_at: Option<usize>,
    pub best_val_acc: f64,
    pub metrics: MetricsLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub runs: Vec<RunSummary>,
    /// Epoch-wise mean over converged runs only; empty when none converged.
    pub averaged: MetricsLog,
}

impl SweepResult {
    pub fn converged_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.converged).count()
    }

    pub fn convergence_fraction(&self) -> f64 {
        self.converged_runs() as f64 / self.runs.len().max(1) as f64
    }

    /// Long-format per-run curves: `seed,converged,<metrics columns>`.
    pub fn runs_csv(&self) -> String {
        let mut out = format!("seed,converged,{}\n", super::metrics::CSV_HEADER);
        for run in &self.runs {
            for row in &run.metrics.rows {
                out.push_str(&format!("{},{},{}\n", run.seed, run.converged as u8, row.csv_row()));
            }
        }
        out
    }

    /// Averaged curve with the number of runs contributing to each epoch.
    pub fn averaged_csv(&self) -> String {
        let mut out = format!("{},runs\n", super::metrics::CSV_HEADER);
        for row in &self.averaged.rows {
            let runs = self
                .runs
                .iter()
                .filter(|r| r.converged && r.metrics.rows.len() >= row.epoch)
                .count();
            out.push_str(&format!("{},{runs}\n", row.csv_row()));
        }
        out
    }
}

/// Mean curve over `logs`; epoch `e` averages the runs that reached it.
pub fn average_curves<'a>(logs: impl IntoIterator<Item = &'a MetricsLog>) -> MetricsLog {
    let logs: Vec<&MetricsLog> = logs.into_iter().collect();
    let longest = logs.iter().map(|l| l.rows.len()).max().unwrap_or(0);
    let rows = (0..longest)
        .map(|i| {
            let present: Vec<&EpochMetrics> = logs.iter().filter_map(|l| l.rows.get(i)).collect();
            let k = present.len() as f64;
            let mean = |f: fn(&EpochMetrics) -> f64| present.iter().map(|r| f(r)).sum::<f64>() / k;
            EpochMetrics {
                epoch: present[0].epoch,
                train_loss: mean(|r| r.train_loss),
                train_acc: mean(|r| r.train_acc),
                val_acc: mean(|r| r.val_acc),
                val_acc_excl_last: mean(|r| r.val_acc_excl_last),
                val_last_token_acc: mean(|r| r.val_last_token_acc),
            }
        })
        .collect();
    MetricsLog { rows }
}

impl DataSpec {
    /// The train/val split a run with this seed trains on.
    pub fn materialize(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        let dataset = gen_dataset(self.count, self.n, self.m, seed, self.supervision)?;
        split(&dataset, self.train_fraction, seed)
    }
}

pub fn summarize(seed: u64, outcome: &TrainOutcome) -> RunSummary {
    RunSummary {
        seed,
        converged: outcome.converged_at.is_some(),
        converged_at: outcome.converged_at,
        best_val_acc: outcome.metrics.best_val_acc(),
        metrics: outcome.metrics.clone(),
    }
}

/// Independent runs, one per seed, run sequentially. Seed `s` generates its own
/// dataset, split and initialization; `train_cfg.seed` is overridden.
pub fn sweep(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &DataSpec,
    seeds: &[u64],
    mut on_epoch: impl FnMut(u64, &EpochMetrics),
) -> Result<SweepResult> {
    if seeds.is_empty() {
        return Err(Error::Config("a sweep needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let (train, val) = data.materialize(seed)?;
        let cfg = TrainConfig { seed, ..*train_cfg };
        let outcome = train_run(model_cfg, &cfg, &train, &val, |row| on_epoch(seed, row))?;
        runs.push(summarize(seed, &outcome));
    }
    let averaged = average_curves(runs.iter().filter(|r| r.converged).map(|r| &r.metrics));
    debug_assert!(runs.iter().all(|r| r.converged == (r.best_val_acc >= CONVERGED_ACC)));
    Ok(SweepResult { runs, averaged })
}
