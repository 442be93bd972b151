//! Trains the default two-layer model on a freshly generated dataset and
//! prints the per-epoch curve.
//!
//! cargo run --release --example train -- [seed] [epochs] [weight_decay] [grad_clip] [out_dir]

use horncircuit::model::{param_count, ModelConfig};
use horncircuit::persist::{save_checkpoint, CheckpointMeta};
use horncircuit::taskgen::{gen_dataset, split};
use horncircuit::train::{train_run, TrainConfig};
use horncircuit::vocab::Supervision;

fn main() -> horncircuit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let epochs: usize = args.next().map_or(250, |s| s.parse().expect("epochs"));
    let defaults = TrainConfig::default();
    let weight_decay: f64 = args.next().map_or(defaults.weight_decay, |s| s.parse().expect("weight decay"));
    // 0 turns clipping off
    let grad_clip: Option<f64> = args
        .next()
        .map_or(defaults.grad_clip, |s| Some(s.parse().expect("grad clip")))
        .filter(|&c| c > 0.0);
    let out_dir = args.next();

    let data = gen_dataset(4096, 20, 5, seed, Supervision::Cot)?;
    let (train, val) = split(&data, 0.75, seed)?;
    let model = ModelConfig::default();
    let cfg = TrainConfig {
        epochs,
        seed,
        weight_decay,
        grad_clip,
        stop_after_converged: Some(0),
        ..TrainConfig::default()
    };
    println!("{} parameters, {} train / {} val", param_count(&model), train.len(), val.len());
    let start = std::time::Instant::now();
    let outcome = train_run(&model, &cfg, &train, &val, |r| {
        println!(
            "epoch {:>3}  loss {:.4}  train {:.3}  val {:.3}  excl-last {:.3}  last {:.3}  [{:.0?}]",
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_acc,
            r.val_acc_excl_last,
            r.val_last_token_acc,
            start.elapsed()
        )
    })?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(&dir).expect("create output directory");
        for snap in &outcome.snapshots {
            let meta = CheckpointMeta {
                train: Some(cfg),
                metrics: snap.metrics,
                ..CheckpointMeta::new(&snap.tag, snap.epoch)
            };
            save_checkpoint(&snap.params, &meta, format!("{dir}/seed{seed}-{}.tmlm", snap.tag))?;
        }
    }
    match outcome.converged_at {
        Some(epoch) => println!("converged at epoch {epoch}"),
        None => println!("did not converge; best val accuracy {:.3}", outcome.metrics.best_val_acc()),
    }
    Ok(())
}
