use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub val_acc_excl_last: f64,
    pub val_last_token_acc: f64,
}

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,val_acc,val_acc_excl_last,val_last_token_acc";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.train_loss, self.train_acc, self.val_acc, self.val_acc_excl_last, self.val_last_token_acc
        )
    }
}

/// Per-epoch training curve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<EpochMetrics>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            writeln!(out, "{}", row.csv_row()).expect("writing to a String");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<MetricsLog> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Input("metrics CSV header mismatch".into()));
        }
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|line| {
                let f: Vec<&str> = line.split(',').collect();
                let num = |i: usize| -> Result<f64> {
                    f.get(i)
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::Input(format!("bad metrics row {line:?}")))
                };
                Ok(EpochMetrics {
                    epoch: num(0)? as usize,
                    train_loss: num(1)?,
                    train_acc: num(2)?,
                    val_acc: num(3)?,
                    val_acc_excl_last: num(4)?,
                    val_last_token_acc: num(5)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricsLog { rows })
    }

    pub fn best_val_acc(&self) -> f64 {
        self.rows.iter().map(|r| r.val_acc).fold(0.0, f64::max)
    }

    /// First epoch whose validation accuracy reaches `threshold`.
    pub fn first_epoch_reaching(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.val_acc >= threshold).map(|r| r.epoch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let log = MetricsLog {
            rows: vec![EpochMetrics {
                epoch: 3,
                train_loss: 1.25,
                train_acc: 0.5,
                val_acc: 0.25,
                val_acc_excl_last: 0.5,
                val_last_token_acc: 0.75,
            }],
        };
        let csv = log.to_csv();
        assert_eq!(csv, format!("{CSV_HEADER}\n3,1.250000,0.500000,0.250000,0.500000,0.750000\n"));
        assert_eq!(MetricsLog::from_csv(&csv).unwrap(), log);
        assert_eq!(log.first_epoch_reaching(0.2), Some(3));
        assert_eq!(log.first_epoch_reaching(0.3), None);
    }
}
