//! Toolkit for 3D dose prediction with dual cross-attention skip connections.
//!
//! Modules, bottom-up:
//! - [`tensor`]: dense `f64` arrays with a reverse-mode tape
//! - [`volume`]: patient data model, sparse file format, preprocessing, augmentation
//! - [`dca`]: the 3D dual cross-attention block
//! - [`losses`]: masked MSE and sigmoid-relaxed DVH losses
//! - [`metrics`]: dose score, DVH score and clinical acceptance rates
//! - [`phantom`]: synthetic patients with analytic dose
//! - [`scaffold`]: a small convolutional encoder-decoder hosting the block, and training
//! - [`config`]: the JSON run config
//! - [`cli`]: command-line entry points

pub mod cli;
pub mod config;
pub mod dca;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod phantom;
pub mod scaffold;
pub mod tensor;
pub mod train;
pub mod volume;
