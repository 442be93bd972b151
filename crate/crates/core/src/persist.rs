//! Checkpoint and dataset files.
//!
//! A checkpoint is `TMLM`, a little-endian `u32` format version, a `u64`
//! header length, that many bytes of JSON header, then every tensor as
//! row-major little-endian `f32` in directory order.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::taskgen::{Dataset, Example, SplitTag};
use crate::train::{EpochMetrics, TrainConfig};
use crate::vocab::Supervision;

pub const MAGIC: &[u8; 4] = b"TMLM";
pub const FORMAT_VERSION: u32 = 1;
/// Refuse headers larger than this before allocating for them.
const MAX_HEADER: u64 = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

/// Everything stored next to the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub tag: String,
    pub epoch: usize,
    pub train: Option<TrainConfig>,
    pub metrics: Option<EpochMetrics>,
}

impl CheckpointMeta {
    pub fn new(tag: impl Into<String>, epoch: usize) -> Self {
        CheckpointMeta {
            tag: tag.into(),
            epoch,
            train: None,
            metrics: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes to a sibling temp file, fsyncs, then renames over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let written = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()
    })();
    if let Err(e) = written.and_then(|_| fs::rename(&tmp, path)) {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams<f32>, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(params.num_params() * 4);
    for (name, shape, data) in params.tensors() {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            offset: payload.len() as u64,
        });
        for x in data {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        model: params.config,
        meta: meta.clone(),
        tensors,
    })?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    write_atomic(path, &bytes)
}

fn read_header_from(reader: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let mut fixed = [0u8; 16];
    reader
        .read_exact(&mut fixed)
        .map_err(|_| corrupt(path, "file shorter than the fixed preamble"))?;
    if &fixed[..4] != MAGIC {
        return Err(corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(fixed[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(corrupt(path, format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(fixed[8..16].try_into().expect("8 bytes"));
    if len > MAX_HEADER {
        return Err(corrupt(path, format!("implausible header length {len}")));
    }
    let mut header = vec![0u8; len as usize];
    reader
        .read_exact(&mut header)
        .map_err(|_| corrupt(path, "truncated header"))?;
    serde_json::from_slice(&header).map_err(|e| corrupt(path, format!("header JSON: {e}")))
}

/// Reads only the preamble and JSON header.
pub fn read_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header_from(&mut f, path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, CheckpointHeader)> {
    let path = path.as_ref();
    let mut f = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header_from(&mut f, path)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;

    let mut params =
        ModelParams::<f32>::zeros(&header.model).map_err(|e| corrupt(path, format!("model config: {e}")))?;
    let mut expected_end = 0u64;
    {
        let slots = params.tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(corrupt(
                path,
                format!("{} tensors listed, model needs {}", header.tensors.len(), slots.len()),
            ));
        }
        for ((name, dst), entry) in slots.into_iter().zip(&header.tensors) {
            if entry.name != name || entry.dtype != "f32" {
                return Err(corrupt(path, format!("unexpected tensor {:?} ({})", entry.name, entry.dtype)));
            }
            if entry.shape.iter().product::<usize>() != dst.len() {
                return Err(corrupt(path, format!("tensor {name} has shape {:?}", entry.shape)));
            }
            let start = entry.offset as usize;
            let end = start + dst.len() * 4;
            let bytes = payload
                .get(start..end)
                .ok_or_else(|| corrupt(path, format!("payload truncated inside {name}")))?;
            for (x, chunk) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            }
            expected_end = expected_end.max(end as u64);
        }
    }
    if payload.len() as u64 != expected_end {
        return Err(corrupt(
            path,
            format!("payload is {} bytes, directory covers {expected_end}", payload.len()),
        ));
    }
    Ok((params, header))
}

/// Dataset description stored next to the text file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub seed: u64,
    pub n: usize,
    pub m: usize,
    pub count: usize,
    pub positives: usize,
    pub negatives: usize,
    pub supervision: Supervision,
    pub split: SplitTag,
}

/// `data.txt` → `data.txt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".json");
    PathBuf::from(p)
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(dataset.len() * 48);
    for e in &dataset.examples {
        text.push_str(&e.to_line());
        text.push('\n');
    }
    let sidecar = DatasetSidecar {
        seed: dataset.seed,
        n: dataset.n,
        m: dataset.m,
        count: dataset.len(),
        positives: dataset.positives(),
        negatives: dataset.negatives(),
        supervision: dataset.supervision,
        split: dataset.split,
    };
    write_atomic(path, text.as_bytes())?;
    write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&sidecar)?)
}

/// Reads a dataset file; the sidecar is used when present, otherwise `m`
/// and the supervision mode are inferred from the first example.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let example =
            Example::parse_line(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        examples.push(example);
    }
    let side = sidecar_path(path);
    let meta = if side.exists() {
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: DatasetSidecar = serde_json::from_slice(&bytes)?;
        if meta.count != examples.len() {
            return Err(corrupt(path, format!("sidecar counts {} examples, file has {}", meta.count, examples.len())));
        }
        meta
    } else {
        let first = examples
            .first()
            .ok_or_else(|| Error::Input(format!("{} holds no examples", path.display())))?;
        DatasetSidecar {
            seed: 0,
            n: crate::vocab::NUM_LETTERS,
            m: first.m(),
            count: examples.len(),
            positives: 0,
            negatives: 0,
            supervision: first.supervision(),
            split: SplitTag::All,
        }
    };
    if let Some(bad) = examples.iter().find(|e| e.m() != meta.m || e.supervision() != meta.supervision) {
        return Err(Error::Input(format!("example {:?} does not match the dataset layout", bad.to_line())));
    }
    Ok(Dataset {
        examples,
        seed: meta.seed,
        n: meta.n,
        m: meta.m,
        supervision: meta.supervision,
        split: meta.split,
    })
}

/// Writes any serializable value as pretty JSON, atomically.
pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &serde_json::to_vec_pretty(value)?)
}

pub fn write_text(text: &str, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), text.as_bytes())
}

pub const CHECKPOINT_EXT: &str = "tmlm";

/// A checkpoint is known by its file stem.
pub fn checkpoint_id(path: &Path) -> Option<String> {
    if path.extension()? != CHECKPOINT_EXT {
        return None;
    }
    path.file_stem()?.to_str().map(str::to_owned)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub id: String,
    pub path: PathBuf,
    pub header: CheckpointHeader,
}

/// Readable checkpoints directly inside `dir`, sorted by id. Files whose
/// header does not parse are skipped.
pub fn list_checkpoints(dir: impl AsRef<Path>) -> Result<Vec<CheckpointEntry>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(id) = checkpoint_id(&path) else { continue };
        if let Ok(header) = read_header(&path) {
            out.push(CheckpointEntry { id, path, header });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}
