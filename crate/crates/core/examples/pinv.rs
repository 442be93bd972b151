//! Truncated pseudoinverses of a checkpoint's projection matrices: how many
//! singular directions each s-threshold keeps, and a retro-projection check.
//!
//! cargo run --release --example pinv -- [CKPT]

use horncircuit::interp::{retained_rank, truncated_pinv};
use horncircuit::model::{ModelConfig, ModelParams, Projection};
use horncircuit::persist::load_checkpoint;

fn main() -> horncircuit::Result<()> {
    let params = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path)?.0,
        None => {
            eprintln!("no checkpoint given; using an untrained model");
            ModelParams::init(&ModelConfig::default(), 0)?
        }
    };
    let thresholds = [0.5, 0.75, 0.8, 0.85, 0.95, 0.97, 0.99];
    print!("{:<8}", "matrix");
    for s in thresholds {
        print!("{:>7}", format!("s={s}"));
    }
    println!();
    for (l, layer) in params.layers.iter().enumerate() {
        for proj in [Projection::Q, Projection::K, Projection::V] {
            let (w, _) = layer.projection(proj);
            let full = truncated_pinv(w.view(), 1.0)?;
            print!("{:<8}", format!("L{} {proj:?}", l + 1));
            for s in thresholds {
                print!("{:>7}", retained_rank(&full.singular_values, s));
            }
            println!();
        }
    }

    // W⁺_k (W x) lands on the top-k right singular subspace
    let (w, _) = params.layers[0].projection(Projection::Q);
    let p = truncated_pinv(w.view(), 0.8)?;
    let x = ndarray::Array1::from_shape_fn(w.ncols(), |i| ((i * 7 % 13) as f64 - 6.0) / 6.0);
    let back = p.pinv.dot(&w.mapv(f64::from).dot(&x));
    let err = (&back - &p.project(x.view())).mapv(|v| v * v).sum().sqrt();
    println!("k = {} at s = 0.8, |W+(Wx) - P x| = {err:.2e}", p.k);
    Ok(())
}
