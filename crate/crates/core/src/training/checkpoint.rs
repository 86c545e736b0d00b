//! Checkpoint container.
//!
//! ```text
//! magic     8 bytes   "MNCDCKPT"
//! version   u32 LE
//! meta_len  u64 LE
//! metadata  meta_len bytes of JSON: config snapshot, step, tensor manifest
//! payload   little-endian f32 values, one run per manifest entry
//! ```
//!
//! Manifest offsets are byte offsets into the payload.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::AdamState;
use crate::model::ChangeDetector;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MNCDCKPT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated: need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("malformed checkpoint metadata: {0}")]
    Metadata(String),
    #[error("parameter {name} has shape {found:?} in the checkpoint but {expected:?} in the model")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("checkpoint has no tensor named {name}")]
    Missing { name: String },
    #[error("checkpoint tensor {name} does not exist in the model")]
    Unexpected { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: serde_json::Value,
    step: u64,
    adam_step: Option<u64>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: Tensor<f32>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub step: u64,
    pub adam_step: Option<u64>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot of `model` (parameters, then buffers) and optionally the
    /// optimizer moments.
    pub fn capture(
        model: &ChangeDetector<f32>,
        adam: Option<&AdamState<f32>>,
        config: serde_json::Value,
        step: u64,
    ) -> Self {
        let store = model.store();
        let mut tensors = Vec::new();
        let mut push = |name: &str, kind, tensor: &Tensor<f32>| {
            tensors.push(NamedTensor { name: name.to_string(), kind, tensor: tensor.clone() });
        };
        for p in store.params() {
            push(&p.name, TensorKind::Param, &p.value);
        }
        for b in store.buffers() {
            push(&b.name, TensorKind::Buffer, &b.value);
        }
        if let Some(adam) = adam {
            for (p, m) in store.params().iter().zip(&adam.m) {
                push(&p.name, TensorKind::AdamM, m);
            }
            for (p, v) in store.params().iter().zip(&adam.v) {
                push(&p.name, TensorKind::AdamV, v);
            }
        }
        Self { config, step, adam_step: adam.map(|a| a.step), tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<ManifestEntry> = self
            .tensors
            .iter()
            .map(|t| {
                let len = t.tensor.numel() as u64;
                let e = ManifestEntry { name: t.name.clone(), kind: t.kind, shape: t.tensor.shape().to_vec(), offset, len };
                offset += 4 * len;
                e
            })
            .collect();
        let meta = Metadata { config: self.config.clone(), step: self.step, adam_step: self.adam_step, tensors: entries };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for t in &self.tensors {
            for v in t.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let available = bytes.len() as u64;
        let truncated = |needed: u64| CheckpointError::Truncated { needed, available };
        if bytes.len() < MAGIC.len() {
            return Err(truncated(MAGIC.len() as u64));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN as u64));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: FORMAT_VERSION });
        }
        let meta_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let payload_start = (HEADER_LEN as u64).checked_add(meta_len).ok_or_else(|| truncated(u64::MAX))?;
        if available < payload_start {
            return Err(truncated(payload_start));
        }
        let meta: Metadata = serde_json::from_slice(&bytes[HEADER_LEN..payload_start as usize])
            .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
        let payload = &bytes[payload_start as usize..];

        let mut seen = BTreeSet::new();
        let mut tensors = Vec::with_capacity(meta.tensors.len());
        for e in meta.tensors {
            if !seen.insert((e.kind, e.name.clone())) {
                return Err(CheckpointError::Metadata(format!("duplicate tensor {}", e.name)));
            }
            if e.shape.iter().product::<usize>() as u64 != e.len {
                return Err(CheckpointError::Metadata(format!("{}: shape {:?} does not hold {} values", e.name, e.shape, e.len)));
            }
            let end = e.offset.checked_add(4 * e.len).ok_or_else(|| truncated(u64::MAX))?;
            if end > payload.len() as u64 {
                return Err(truncated(payload_start + end));
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let tensor = Tensor::new(e.shape, data).map_err(|err| CheckpointError::Metadata(format!("{}: {err}", e.name)))?;
            tensors.push(NamedTensor { name: e.name, kind: e.kind, tensor });
        }
        Ok(Self { config: meta.config, step: meta.step, adam_step: meta.adam_step, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|source| CheckpointError::Io { path: parent.to_path_buf(), source })?;
        }
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }

    fn find(&self, kind: TensorKind, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.tensors
            .iter()
            .find(|t| t.kind == kind && t.name == name)
            .map(|t| &t.tensor)
            .ok_or_else(|| CheckpointError::Missing { name: name.to_string() })
    }

    fn checked<'a>(&'a self, kind: TensorKind, name: &str, expected: &[usize]) -> Result<&'a Tensor<f32>, CheckpointError> {
        let t = self.find(kind, name)?;
        if t.shape() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: expected.to_vec(),
                found: t.shape().to_vec(),
            });
        }
        Ok(t)
    }

    /// Copies parameters and buffers into `model`. Every model tensor must be
    /// present with the same shape and the checkpoint may hold no others.
    pub fn restore_into(&self, model: &mut ChangeDetector<f32>) -> Result<(), CheckpointError> {
        let store = model.store();
        let known: BTreeSet<(TensorKind, &str)> = store
            .params()
            .iter()
            .map(|p| (TensorKind::Param, p.name.as_str()))
            .chain(store.buffers().iter().map(|b| (TensorKind::Buffer, b.name.as_str())))
            .collect();
        if let Some(t) = self
            .tensors
            .iter()
            .filter(|t| matches!(t.kind, TensorKind::Param | TensorKind::Buffer))
            .find(|t| !known.contains(&(t.kind, t.name.as_str())))
        {
            return Err(CheckpointError::Unexpected { name: t.name.clone() });
        }
        let params: Vec<Tensor<f32>> = store
            .params()
            .iter()
            .map(|p| self.checked(TensorKind::Param, &p.name, p.value.shape()).cloned())
            .collect::<Result<_, _>>()?;
        let buffers: Vec<Tensor<f32>> = store
            .buffers()
            .iter()
            .map(|b| self.checked(TensorKind::Buffer, &b.name, b.value.shape()).cloned())
            .collect::<Result<_, _>>()?;
        let store = model.store_mut();
        for (p, v) in store.params_mut().iter_mut().zip(params) {
            p.value = v;
        }
        for (b, v) in store.buffers_mut().iter_mut().zip(buffers) {
            b.value = v;
        }
        Ok(())
    }

    /// Optimizer moments laid out for `model`, if the checkpoint has them.
    pub fn adam_state(&self, model: &ChangeDetector<f32>) -> Result<Option<AdamState<f32>>, CheckpointError> {
        let Some(step) = self.adam_step else { return Ok(None) };
        let params = model.store().params();
        let take = |kind| {
            params.iter().map(|p| self.checked(kind, &p.name, p.value.shape()).cloned()).collect::<Result<Vec<_>, _>>()
        };
        Ok(Some(AdamState { step, m: take(TensorKind::AdamM)?, v: take(TensorKind::AdamV)? }))
    }
}
