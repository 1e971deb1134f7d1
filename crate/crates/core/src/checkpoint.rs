//! On-disk training checkpoints.
//!
//! A checkpoint is a directory holding `manifest.txt` and `tensors.bin`. The
//! manifest is line oriented:
//!
//! ```text
//! segbench-checkpoint 1
//! model skipnet-mobilenet
//! step 150
//! tensor param/enc/conv1.weight f64 8,3,3,3 0 1728
//! ```
//!
//! Each `tensor` line gives a name, dtype, comma-separated shape, byte offset
//! and byte length into `tensors.bin`, which holds little-endian `f64`s packed
//! back to back in manifest order. Tensors are written in a fixed order
//! (parameters, buffers, Adam moments, loss history; names sorted within each
//! group), so equal states produce identical bytes.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{ModelParams, Tensor};
use crate::training::TrainState;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";
pub const FORMAT_HEADER: &str = "segbench-checkpoint 1";

const PARAM_PREFIX: &str = "param/";
const BUFFER_PREFIX: &str = "buffer/";
const FIRST_MOMENT_PREFIX: &str = "adam.m/";
const SECOND_MOMENT_PREFIX: &str = "adam.v/";
const LOSS_HISTORY: &str = "loss_history";

/// Largest tensor accepted from a manifest, in elements.
pub const MAX_TENSOR_ELEMS: usize = 1 << 28;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("tensor data: {0}")]
    Blob(String),
    #[error("tensor name `{0}` cannot be stored")]
    InvalidName(String),
    #[error("checkpoint is for model `{found}`, expected `{expected}`")]
    ModelMismatch { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub model: String,
    pub step: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{FORMAT_HEADER}\nmodel {}\nstep {}\n", self.model, self.step);
        for e in &self.entries {
            let shape: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            s.push_str(&format!("tensor {} f64 {} {} {}\n", e.name, shape.join(","), e.offset, e.len));
        }
        s
    }
}

fn valid_token(s: &str) -> bool {
    !s.is_empty() && !s.chars().any(char::is_whitespace)
}

/// Parses and checks a manifest: entries must be contiguous from offset 0
/// and each byte length must match its shape.
pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let err = |line: usize, message: String| CheckpointError::Manifest { line: line + 1, message };
    let (i, header) = lines.next().ok_or_else(|| err(0, "empty manifest".into()))?;
    if header.trim() != FORMAT_HEADER {
        return Err(err(i, format!("expected `{FORMAT_HEADER}`")));
    }
    let mut field = |key: &str| -> Result<String> {
        let (i, l) = lines.next().ok_or_else(|| err(0, format!("missing `{key}` line")))?;
        let mut parts = l.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(k), Some(v), None) if k == key => Ok(v.to_string()),
            _ => Err(err(i, format!("expected `{key} <value>`"))),
        }
    };
    let model = field("model")?;
    let step_text = field("step")?;
    let step = step_text
        .parse()
        .map_err(|_| err(2, format!("bad step `{step_text}`")))?;
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut seen = HashSet::new();
    let mut expected_offset = 0usize;
    for (i, l) in lines {
        let parts: Vec<&str> = l.split_whitespace().collect();
        let ["tensor", name, dtype, shape, offset, len] = parts[..] else {
            return Err(err(i, "expected `tensor <name> f64 <shape> <offset> <len>`".into()));
        };
        if dtype != "f64" {
            return Err(err(i, format!("unsupported dtype `{dtype}`")));
        }
        if !seen.insert(name) {
            return Err(err(i, format!("duplicate tensor `{name}`")));
        }
        let shape = shape
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err(i, format!("bad shape `{shape}`")))?;
        let elems = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= MAX_TENSOR_ELEMS)
            .ok_or_else(|| err(i, format!("tensor `{name}` is too large")))?;
        let offset: usize = offset.parse().map_err(|_| err(i, format!("bad offset `{offset}`")))?;
        let len: usize = len.parse().map_err(|_| err(i, format!("bad length `{len}`")))?;
        if len != elems * 8 {
            return Err(err(i, format!("length {len} does not match shape of {elems} elements")));
        }
        if offset != expected_offset {
            return Err(err(i, format!("offset {offset}, expected {expected_offset}")));
        }
        expected_offset += len;
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape,
            offset,
            len,
        });
    }
    Ok(Manifest { model, step, entries })
}

/// A training state together with the model it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub state: TrainState,
}

impl Checkpoint {
    /// Fails unless the checkpoint was written for `model`.
    pub fn expect_model(&self, model: &str) -> Result<()> {
        if self.model != model {
            return Err(CheckpointError::ModelMismatch {
                expected: model.to_string(),
                found: self.model.clone(),
            });
        }
        Ok(())
    }
}

fn groups(state: &TrainState) -> [(&'static str, &BTreeMap<String, Tensor>); 4] {
    [
        (PARAM_PREFIX, &state.params.parameters),
        (BUFFER_PREFIX, &state.params.buffers),
        (FIRST_MOMENT_PREFIX, &state.first_moments),
        (SECOND_MOMENT_PREFIX, &state.second_moments),
    ]
}

/// Serialises to `(manifest text, blob bytes)`.
pub fn encode_checkpoint(model: &str, state: &TrainState) -> Result<(String, Vec<u8>)> {
    if !valid_token(model) {
        return Err(CheckpointError::InvalidName(model.to_string()));
    }
    let history = Tensor::from_vec(&[state.loss_history.len()], state.loss_history.clone());
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (prefix, map) in groups(state) {
        for (name, t) in map {
            tensors.push((format!("{prefix}{name}"), t));
        }
    }
    tensors.push((LOSS_HISTORY.to_string(), &history));
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        if !valid_token(&name) {
            return Err(CheckpointError::InvalidName(name));
        }
        let offset = blob.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        model: model.to_string(),
        step: state.step,
        entries,
    };
    Ok((manifest.to_text(), blob))
}

/// Inverse of [`encode_checkpoint`].
pub fn decode_checkpoint(manifest: &str, blob: &[u8]) -> Result<Checkpoint> {
    let m = parse_manifest(manifest)?;
    let total: usize = m.entries.iter().map(|e| e.len).sum();
    if total != blob.len() {
        return Err(CheckpointError::Blob(format!(
            "manifest describes {total} bytes, file has {}",
            blob.len()
        )));
    }
    let mut state = TrainState::new(ModelParams::default());
    let mut history = None;
    for e in &m.entries {
        let data = blob[e.offset..e.offset + e.len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_vec(&e.shape, data);
        if e.name == LOSS_HISTORY {
            if e.shape.len() != 1 {
                return Err(CheckpointError::Blob("loss history must be one-dimensional".into()));
            }
            history = Some(t.into_data());
            continue;
        }
        let target = if let Some(n) = e.name.strip_prefix(PARAM_PREFIX) {
            Some((&mut state.params.parameters, n))
        } else if let Some(n) = e.name.strip_prefix(BUFFER_PREFIX) {
            Some((&mut state.params.buffers, n))
        } else if let Some(n) = e.name.strip_prefix(FIRST_MOMENT_PREFIX) {
            Some((&mut state.first_moments, n))
        } else if let Some(n) = e.name.strip_prefix(SECOND_MOMENT_PREFIX) {
            Some((&mut state.second_moments, n))
        } else {
            None
        };
        let (map, name) = target.ok_or_else(|| CheckpointError::Blob(format!("unknown tensor group in `{}`", e.name)))?;
        map.insert(name.to_string(), t);
    }
    state.step = m.step;
    state.loss_history = history.ok_or_else(|| CheckpointError::Blob("missing loss history".into()))?;
    for name in state.params.parameters.keys() {
        if !state.first_moments.contains_key(name) || !state.second_moments.contains_key(name) {
            return Err(CheckpointError::Blob(format!("missing optimizer moments for `{name}`")));
        }
    }
    Ok(Checkpoint { model: m.model, state })
}

fn io_err(path: &Path, e: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn save_checkpoint(dir: &Path, model: &str, state: &TrainState) -> Result<()> {
    let (manifest, blob) = encode_checkpoint(model, state)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, blob).map_err(|e| io_err(&blob_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest).map_err(|e| io_err(&manifest_path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
    decode_checkpoint(&manifest, &blob)
}
