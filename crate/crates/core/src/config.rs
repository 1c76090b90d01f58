//! Run configuration: one JSON document with `model`, `train`, `loss`,
//! `data` and `eval` blocks. Missing blocks and fields take their defaults;
//! unknown fields are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::losses::{LossConfig, LossError};
use crate::metrics::DEFAULT_THRESHOLD_GY;
use crate::phantom::{DEFAULT_SIZE, DEFAULT_TRAIN_COUNT, DEFAULT_VAL_COUNT, DEFAULT_VOXEL_DIMS_MM};
use crate::scaffold::{ScaffoldConfig, ScaffoldError};
use crate::train::{LossSetup, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ScaffoldError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Where training data comes from: an on-disk cohort, or phantoms generated on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of patient subdirectories; phantoms are generated when absent.
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub size: usize,
    pub voxel_dims_mm: [f64; 3],
    pub phantom_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            n_train: DEFAULT_TRAIN_COUNT,
            n_val: DEFAULT_VAL_COUNT,
            size: DEFAULT_SIZE,
            voxel_dims_mm: DEFAULT_VOXEL_DIMS_MM,
            phantom_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold_gy: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold_gy: DEFAULT_THRESHOLD_GY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ScaffoldConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::from_json(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if !(self.eval.threshold_gy.is_finite() && self.eval.threshold_gy > 0.0) {
            return Err(ConfigError::Invalid("eval.threshold_gy must be positive".into()));
        }
        if self.data.size == 0 || !self.data.size.is_multiple_of(self.model.divisor()) {
            return Err(ConfigError::Invalid(format!(
                "data.size {} must be a positive multiple of {}",
                self.data.size,
                self.model.divisor()
            )));
        }
        if self.data.n_train == 0 {
            return Err(ConfigError::Invalid("data.n_train must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical JSON with every default filled in.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`canonical_json`](Self::canonical_json), hex encoded.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn loss_setup(&self) -> Result<LossSetup, ConfigError> {
        Ok(LossSetup {
            relaxation: self.loss.relaxation()?,
            weights: self.loss.weights()?,
            objective: self.train.objective,
        })
    }
}
