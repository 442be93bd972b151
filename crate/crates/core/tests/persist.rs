use std::fs;

use horncircuit::model::{ModelConfig, ModelParams};
use horncircuit::persist::*;
use horncircuit::taskgen::{gen_dataset, split};
use horncircuit::train::{evaluate, TrainConfig};
use horncircuit::vocab::Supervision;
use horncircuit::Error;

fn sample() -> (ModelParams<f32>, CheckpointMeta) {
    let params = ModelParams::<f32>::init(&ModelConfig::default(), 11).unwrap();
    let meta = CheckpointMeta {
        train: Some(TrainConfig::default()),
        ..CheckpointMeta::new("final", 17)
    };
    (params, meta)
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.tmlm");
    let (params, meta) = sample();
    save_checkpoint(&params, &meta, &path).unwrap();
    let (loaded, header) = load_checkpoint(&path).unwrap();
    for ((_, _, a), (_, _, b)) in params.tensors().into_iter().zip(loaded.tensors()) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(header.meta, meta);
    assert_eq!(header.model, params.config);
    // saving the loaded copy reproduces the file byte for byte
    let again = dir.path().join("b.tmlm");
    save_checkpoint(&loaded, &header.meta, &again).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn reloaded_checkpoint_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.tmlm");
    let (params, meta) = sample();
    let data = gen_dataset(32, 20, 5, 4, Supervision::Cot).unwrap();
    save_checkpoint(&params, &meta, &path).unwrap();
    let (loaded, _) = load_checkpoint(&path).unwrap();
    assert_eq!(evaluate(&params, &data).unwrap(), evaluate(&loaded, &data).unwrap());
}

#[test]
fn header_parses_without_payload() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.tmlm");
    let (params, meta) = sample();
    save_checkpoint(&params, &meta, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
    assert_eq!(json["tag"], "final");
    assert_eq!(json["tensors"][0]["name"], "tok_emb");
    assert_eq!(json["tensors"][0]["shape"], serde_json::json!([28, 128]));
    // a file cut right after the header still yields its header
    fs::write(&path, &bytes[..16 + len]).unwrap();
    assert_eq!(read_header(&path).unwrap().meta.epoch, 17);
    assert_eq!(bytes.len(), 16 + len + 4 * params.num_params());
}

#[test]
fn damaged_files_are_reported_as_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.tmlm");
    let (params, meta) = sample();
    save_checkpoint(&params, &meta, &path).unwrap();
    let good = fs::read(&path).unwrap();

    let truncated = &good[..good.len() - 3];
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let mut trailing = good.clone();
    trailing.extend_from_slice(&[0; 4]);
    for bytes in [truncated, &good[..10], &bad_magic[..], &bad_version[..], &trailing[..]] {
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Corrupt { .. })));
    }
    assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(200, 20, 5, 9, Supervision::Cot).unwrap();
    let (train, _) = split(&data, 0.75, 9).unwrap();
    let path = dir.path().join("train.txt");
    write_dataset(&train, &path).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.len(), train.len());
    assert_eq!((back.seed, back.m, back.split), (9, 5, train.split));
    for (a, b) in train.examples.iter().zip(&back.examples) {
        assert_eq!((a.prompt(), &a.target, a.label), (b.prompt(), &b.target, b.label));
    }
    let first = fs::read(&path).unwrap();
    write_dataset(&back, &path).unwrap();
    assert_eq!(first, fs::read(&path).unwrap());
    let line = String::from_utf8(first).unwrap().lines().next().unwrap().to_string();
    assert!(!line.starts_with('@') && line.split('\t').nth(1).unwrap().len() == 21);
    let side: serde_json::Value = serde_json::from_slice(&fs::read(sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(side["count"], 150);
    assert_eq!(side["supervision"], "cot");
}

#[test]
fn binary_datasets_load_without_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(10, 20, 5, 2, Supervision::Binary).unwrap();
    let path = dir.path().join("bin.txt");
    write_dataset(&data, &path).unwrap();
    fs::remove_file(sidecar_path(&path)).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back.supervision, Supervision::Binary);
    assert_eq!(back.layout().output_len(), 1);
}

#[test]
fn listing_skips_foreign_and_broken_files() {
    let dir = tempfile::tempdir().unwrap();
    assert!(list_checkpoints(dir.path()).unwrap().is_empty());
    let (params, meta) = sample();
    save_checkpoint(&params, &meta, dir.path().join("seed1-final.tmlm")).unwrap();
    save_checkpoint(&params, &CheckpointMeta::new("t1", 3), dir.path().join("seed1-t1.tmlm")).unwrap();
    fs::write(dir.path().join("broken.tmlm"), b"TMLM").unwrap();
    fs::write(dir.path().join("notes.txt"), b"hello").unwrap();
    let listed = list_checkpoints(dir.path()).unwrap();
    let ids: Vec<_> = listed.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["seed1-final", "seed1-t1"]);
    assert_eq!(listed[1].header.meta.epoch, 3);
}
