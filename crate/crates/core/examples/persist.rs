//! Saves a checkpoint and a dataset, reads them back, and shows that the
//! reloaded model evaluates identically.
//!
//! cargo run --release --example persist -- [dir]

use horncircuit::model::{ModelConfig, ModelParams};
use horncircuit::persist::{load_checkpoint, read_dataset, read_header, save_checkpoint, write_dataset, CheckpointMeta};
use horncircuit::train::{evaluate, DataSpec};

fn main() -> horncircuit::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, Into::into);
    let params = ModelParams::<f32>::init(&ModelConfig::default(), 3)?;
    let ckpt = dir.join("example.tmlm");
    save_checkpoint(&params, &CheckpointMeta::new("init", 0), &ckpt)?;
    let header = read_header(&ckpt)?;
    println!("{}: {} tensors, model {:?}", ckpt.display(), header.tensors.len(), header.model);

    let spec = DataSpec {
        count: 256,
        ..DataSpec::default()
    };
    let (_, val) = spec.materialize(1)?;
    let data = dir.join("example-val.txt");
    write_dataset(&val, &data)?;
    let val_back = read_dataset(&data)?;
    // lines and labels survive; generation provenance is not stored
    let lines = |d: &horncircuit::taskgen::Dataset| d.examples.iter().map(|e| e.to_line()).collect::<Vec<_>>();
    assert_eq!(lines(&val_back), lines(&val));

    let (loaded, _) = load_checkpoint(&ckpt)?;
    let (a, b) = (evaluate(&params, &val)?, evaluate(&loaded, &val_back)?);
    println!(
        "accuracy before {:.4} / after {:.4}; identical outcomes: {}",
        a.full_seq_acc,
        b.full_seq_acc,
        a.outcomes == b.outcomes
    );
    Ok(())
}
