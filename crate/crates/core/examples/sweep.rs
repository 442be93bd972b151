//! Multi-seed convergence sweep, printing per-run summaries and the
//! averaged curve over converged runs as CSV.
//!
//! cargo run --release --example sweep -- [seeds] [epochs] [count]

use horncircuit::model::ModelConfig;
use horncircuit::train::{sweep, DataSpec, TrainConfig};

fn main() -> horncircuit::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(3, |s| s.parse().expect("seeds"));
    let epochs: usize = args.next().map_or(250, |s| s.parse().expect("epochs"));
    let count: usize = args.next().map_or(4096, |s| s.parse().expect("count"));

    let seeds: Vec<u64> = (0..seeds).collect();
    let data = DataSpec {
        count,
        ..DataSpec::default()
    };
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    let result = sweep(&ModelConfig::default(), &cfg, &data, &seeds, |seed, m| {
        if m.epoch % 10 == 0 {
            eprintln!("seed {seed} epoch {:>3} val {:.3}", m.epoch, m.val_acc);
        }
    })?;
    print!("{}", result.runs_csv());
    println!("converged {}/{}", result.converged_runs(), result.runs.len());
    if result.converged_runs() > 0 {
        print!("{}", result.averaged_csv());
    }
    Ok(())
}
