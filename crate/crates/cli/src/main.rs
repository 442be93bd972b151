use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use horncircuit::explore::{self, AverageRequest, AverageResponse, RunRequest, RunThresholds, Subset, TraceResponse};
use horncircuit::interp::{PinvCache, SThresholds};
use horncircuit::model::{ModelConfig, ModelParams};
use horncircuit::persist::{self, CheckpointMeta};
use horncircuit::taskgen::{gen_dataset, split, Dataset};
use horncircuit::train::{evaluate, sweep, train_run, DataSpec, LossMask, TrainConfig};
use horncircuit::vocab::Supervision;
use horncircuit::Error;

#[derive(Parser)]
#[command(name = "horncircuit", version, about = "Generate, train, evaluate and inspect chain-of-thought reasoning models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a balanced dataset and its train/val split.
    Gen {
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        m: usize,
        #[arg(long, default_value_t = 4096)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "cot")]
        supervision: Supervision,
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; writes milestone and final checkpoints plus a metrics CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 250)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Greedy accuracy of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory (its val split is used) or dataset file.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train several seeds and write per-run and converged-average curves.
    Sweep {
        /// `0..9` (inclusive) or `1,4,7`.
        #[arg(long, default_value = "0..9")]
        seeds: String,
        #[arg(long, default_value_t = 250)]
        epochs: usize,
        #[arg(long, default_value_t = 4096)]
        count: usize,
        #[arg(long, default_value_t = 5)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: Hyper,
    },
    /// Trace one prompt, or average attention over a dataset.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, required_unless_present = "average")]
        prompt: Option<String>,
        /// Only links of this layer (1-based).
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long)]
        threshold: Option<f32>,
        /// Positions (`25,29`) or presets `>`, `,`, `-`.
        #[arg(long, allow_hyphen_values = true)]
        dst_positions: Option<String>,
        #[arg(long, default_value_t = SThresholds::default().q)]
        sk_q: f64,
        #[arg(long, default_value_t = SThresholds::default().k)]
        sk_k: f64,
        #[arg(long, default_value_t = SThresholds::default().v)]
        sk_v: f64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Average over this subset of `--data` instead of tracing a prompt.
        #[arg(long, requires = "data")]
        average: Option<Subset>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a JSON report from `inspect` as SVG.
    Export {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the JSON API over a checkpoint directory.
    Serve {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Dataset for `/average`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Hyper {
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    /// Decoupled decay on weight matrices.
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    weight_decay: f64,
    /// Periodic checkpoint interval in epochs (0 = milestones and final only).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Supervise every position instead of the output only.
    #[arg(long)]
    full_sequence_loss: bool,
    /// Rescale batch gradients to at most this global norm (0 disables).
    #[arg(long, default_value_t = TrainConfig::default().grad_clip.unwrap_or(0.0))]
    grad_clip: f64,
    /// Stop this many epochs after convergence.
    #[arg(long)]
    stop_after_converged: Option<usize>,
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
}

impl Hyper {
    fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            seed,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            weight_decay: self.weight_decay,
            checkpoint_every: self.checkpoint_every,
            loss_mask: if self.full_sequence_loss {
                LossMask::FullSequence
            } else {
                LossMask::OutputOnly
            },
            stop_after_converged: self.stop_after_converged,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            ..TrainConfig::default()
        }
    }

    fn model_config(&self, context_len: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.layers,
            n_heads: self.heads,
            context_len,
            ..ModelConfig::default()
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Svg,
    Text,
    Json,
}

/// Prints the resolved settings to stderr so stdout stays machine-readable.
fn announce(what: &str, value: &impl serde::Serialize) {
    eprintln!("{what}: {}", serde_json::to_string(value).unwrap_or_default());
}

fn dataset_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("train.txt"), dir.join("val.txt"))
}

fn load_eval_data(path: &Path) -> horncircuit::Result<Dataset> {
    if path.is_dir() {
        persist::read_dataset(dataset_files(path).1)
    } else {
        persist::read_dataset(path)
    }
}

fn load_params(path: &Path) -> horncircuit::Result<(ModelParams<f32>, String)> {
    let id = persist::checkpoint_id(path)
        .ok_or_else(|| Error::Input(format!("{} is not a .{} file", path.display(), persist::CHECKPOINT_EXT)))?;
    let (params, _) = persist::load_checkpoint(path)?;
    Ok((params, id))
}

fn emit(text: &str, out: Option<&Path>) -> horncircuit::Result<()> {
    match out {
        Some(p) => persist::write_text(text, p),
        None => {
            use std::io::Write;
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn parse_seeds(spec: &str) -> horncircuit::Result<Vec<u64>> {
    let bad = || Error::Config(format!("bad seed list {spec:?}; use 0..9 or 1,2,3"));
    if let Some((a, b)) = spec.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    spec.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn fmt_metrics(m: &horncircuit::train::EpochMetrics) -> String {
    format!(
        "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}  excl-last {:.3}  last {:.3}",
        m.epoch, m.train_loss, m.train_acc, m.val_acc, m.val_acc_excl_last, m.val_last_token_acc
    )
}

fn run(cli: Cli) -> horncircuit::Result<()> {
    match cli.command {
        Command::Gen {
            n,
            m,
            count,
            seed,
            supervision,
            train_fraction,
            out,
        } => {
            announce(
                "gen",
                &serde_json::json!({"n": n, "m": m, "count": count, "seed": seed, "supervision": supervision, "train_fraction": train_fraction, "out": out}),
            );
            let data = gen_dataset(count, n, m, seed, supervision)?;
            let (train, val) = split(&data, train_fraction, seed)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let (tp, vp) = dataset_files(&out);
            persist::write_dataset(&train, &tp)?;
            persist::write_dataset(&val, &vp)?;
            println!(
                "{} examples ({} positive) -> {} train, {} val in {}",
                data.len(),
                data.positives(),
                train.len(),
                val.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            epochs,
            seed,
            ckpt_dir,
            hyper,
        } => {
            let (tp, vp) = dataset_files(&data);
            let train = persist::read_dataset(&tp)?;
            let val = persist::read_dataset(&vp)?;
            let cfg = hyper.train_config(epochs, seed);
            let model = hyper.model_config(train.layout().seq_len());
            announce("train", &serde_json::json!({"model": model, "train": cfg, "data": data, "ckpt_dir": ckpt_dir}));
            std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
            let outcome = train_run(&model, &cfg, &train, &val, |m| println!("{}", fmt_metrics(m)))?;
            for snap in &outcome.snapshots {
                let meta = CheckpointMeta {
                    train: Some(cfg),
                    metrics: snap.metrics,
                    ..CheckpointMeta::new(&snap.tag, snap.epoch)
                };
                let path = ckpt_dir.join(format!("seed{seed}-{}.{}", snap.tag, persist::CHECKPOINT_EXT));
                persist::save_checkpoint(&snap.params, &meta, &path)?;
                println!("saved {}", path.display());
            }
            persist::write_text(&outcome.metrics.to_csv(), ckpt_dir.join(format!("seed{seed}-metrics.csv")))?;
            match outcome.converged_at {
                Some(e) => println!("converged at epoch {e}"),
                None => println!("not converged; best val accuracy {:.4}", outcome.metrics.best_val_acc()),
            }
            if let Some(reason) = outcome.aborted {
                return Err(Error::Numeric(reason));
            }
        }
        Command::Eval { ckpt, data } => {
            announce("eval", &serde_json::json!({"ckpt": ckpt, "data": data}));
            let (params, _) = load_params(&ckpt)?;
            let ds = load_eval_data(&data)?;
            let r = evaluate(&params, &ds)?;
            println!("examples              {}", ds.len());
            println!("full_seq_acc          {:.4}", r.full_seq_acc);
            println!("acc_excl_last_token   {:.4}", r.acc_excl_last);
            println!("last_token_acc        {:.4}", r.last_token_acc);
        }
        Command::Sweep {
            seeds,
            epochs,
            count,
            m,
            out,
            hyper,
        } => {
            let seeds = parse_seeds(&seeds)?;
            let data = DataSpec {
                count,
                m,
                ..DataSpec::default()
            };
            let cfg = hyper.train_config(epochs, 0);
            let model = hyper.model_config(horncircuit::vocab::Layout::new(m, data.supervision).seq_len());
            announce(
                "sweep",
                &serde_json::json!({"seeds": seeds, "model": model, "train": cfg, "data": data, "out": out}),
            );
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let result = sweep(&model, &cfg, &data, &seeds, |seed, m| println!("seed {seed}  {}", fmt_metrics(m)))?;
            for run in &result.runs {
                persist::write_text(&run.metrics.to_csv(), out.join(format!("seed{}-metrics.csv", run.seed)))?;
            }
            persist::write_text(&result.runs_csv(), out.join("runs.csv"))?;
            persist::write_text(&result.averaged_csv(), out.join("averaged.csv"))?;
            println!(
                "{}/{} runs converged ({:.0}%)",
                result.converged_runs(),
                result.runs.len(),
                100.0 * result.convergence_fraction()
            );
        }
        Command::Inspect {
            ckpt,
            prompt,
            layer,
            threshold,
            dst_positions,
            sk_q,
            sk_k,
            sk_v,
            format,
            average,
            data,
            out,
        } => {
            let (params, id) = load_params(&ckpt)?;
            if let Some(subset) = average {
                let ds = load_eval_data(data.as_deref().expect("clap enforces --data"))?;
                let dst_filter = dst_positions.map(|s| explore::parse_dst_filter(&s, ds.m)).transpose()?;
                let req = AverageRequest {
                    ckpt: id,
                    subset,
                    threshold: threshold.unwrap_or(0.1),
                    dst_filter,
                };
                announce("inspect", &req);
                let resp = explore::average(&params, &ds, &req)?;
                let text = match format {
                    Format::Json => explore::to_json(&resp)?,
                    Format::Svg => explore::render_svg(&explore::average_as_trace(&resp)),
                    Format::Text => explore::render_text(&explore::average_as_trace(&resp)),
                };
                return emit(&text, out.as_deref());
            }
            let prompt = prompt.expect("clap enforces --prompt");
            let m = horncircuit::taskgen::parse_prompt(prompt.trim_start_matches('@')).map_or(5, |(rules, _, _)| rules.len());
            let dst_filter = dst_positions.map(|s| explore::parse_dst_filter(&s, m)).transpose()?;
            let req = RunRequest {
                ckpt: id,
                prompt,
                thresholds: RunThresholds {
                    link: threshold.unwrap_or(RunThresholds::default().link),
                    s_q: sk_q,
                    s_k: sk_k,
                    s_v: sk_v,
                },
                dst_filter,
                layer,
            };
            announce("inspect", &req);
            let resp = explore::run(&params, &req, &mut PinvCache::new())?;
            let text = match format {
                Format::Json => explore::to_json(&resp)?,
                Format::Svg => explore::render_svg(&resp),
                Format::Text => explore::render_text(&resp),
            };
            emit(&text, out.as_deref())?;
        }
        Command::Export { report, out } => {
            announce("export", &serde_json::json!({"report": report, "out": out}));
            let bytes = std::fs::read(&report).map_err(|e| Error::io(&report, e))?;
            let value: serde_json::Value = serde_json::from_slice(&bytes)?;
            let view = match value.get("schema").and_then(|s| s.as_str()) {
                Some(explore::TRACE_SCHEMA) => serde_json::from_value::<TraceResponse>(value)?,
                Some(explore::AVERAGE_SCHEMA) => explore::average_as_trace(&serde_json::from_value::<AverageResponse>(value)?),
                other => return Err(Error::Input(format!("unsupported report schema {other:?}"))),
            };
            persist::write_text(&explore::render_svg(&view), &out)?;
            println!("wrote {}", out.display());
        }
        Command::Serve {
            ckpt_dir,
            port,
            host,
            data,
        } => {
            announce("serve", &serde_json::json!({"ckpt_dir": ckpt_dir, "host": host, "port": port, "data": data}));
            let mut state = horncircuit_serve::AppState::new(&ckpt_dir);
            if let Some(d) = data {
                state = state.with_dataset(load_eval_data(&d)?);
            }
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("<runtime>", e))?;
            eprintln!("listening on http://{host}:{port}");
            rt.block_on(horncircuit_serve::serve(state, (host, port).into()))
                .map_err(|e| Error::io(format!("{host}:{port}"), e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let user = matches!(
                e,
                Error::Config(_)
                    | Error::Input(_)
                    | Error::Encoding { .. }
                    | Error::Rejected(_)
                    | Error::Corrupt { .. }
                    | Error::Io { .. }
                    | Error::Json(_)
            );
            ExitCode::from(if user { 1 } else { 2 })
        }
    }
}
