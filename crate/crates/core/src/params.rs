//! Named parameter collections and the on-disk checkpoint format.
//!
//! A checkpoint is two files: `checkpoint.json`, a manifest listing every
//! tensor's name, shape and element offset in order, and `checkpoint.bin`,
//! the concatenated little-endian `f64` data in manifest order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_DATA: &str = "checkpoint.bin";
const CHECKPOINT_FORMAT: &str = "dcadose-checkpoint-v1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ordered map of parameter name to value. Iteration order is insertion order
/// and is what checkpoints and gradient checks use.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

/// Parameters registered on a tape for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    /// Panics if the parameter was never registered; model code only asks for
    /// names it created itself.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter `{name}` is not bound"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Registers every tensor as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams, TensorError> {
        let mut vars = IndexMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.param(t.clone())?);
        }
        Ok(BoundParams { vars })
    }

    /// Gradients collected after `backward`; unreached parameters get zeros.
    pub fn grads_from(&self, tape: &Tape, bound: &BoundParams) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, t) in &self.tensors {
            let g = tape
                .grad(bound.get(name))
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut bytes = Vec::with_capacity(self.numel() * 8);
        let mut offset = 0;
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.to_string(),
            dtype: "f64-le".to_string(),
            numel: offset,
            tensors: entries,
        };
        fs::write(dir.join(CHECKPOINT_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        fs::write(dir.join(CHECKPOINT_DATA), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_MANIFEST))?)?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(format!("unknown format `{}`", manifest.format)));
        }
        let bytes = fs::read(dir.join(CHECKPOINT_DATA))?;
        if bytes.len() != manifest.numel * 8 {
            return Err(CheckpointError::Format(format!(
                "data holds {} bytes, manifest declares {} values",
                bytes.len(),
                manifest.numel
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let mut store = ParamStore::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let data = values
                .get(e.offset..e.offset + n)
                .ok_or_else(|| CheckpointError::Format(format!("tensor `{}` out of range", e.name)))?
                .to_vec();
            store.insert(e.name, Tensor::new(e.shape, data)?);
        }
        Ok(store)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    dtype: String,
    numel: usize,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}
