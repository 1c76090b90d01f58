//! Training objectives on dose grids: masked MSE, sigmoid-relaxed DVH curves,
//! the per-structure DVH loss, the global (body-mask) DVH loss and their
//! weighted combination.
//!
//! Every loss takes the prediction as a tape [`Var`] so it can be
//! backpropagated; the ground truth is usually a constant on the same tape.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::volume::{Grid, Mask, Structure};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("{0}: mask is empty")]
    EmptyMask(String),
    #[error("no structures present")]
    NoStructures,
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("mask has {mask} voxels but dose has {dose}")]
    Shape { mask: usize, dose: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Bin thresholds and sigmoid steepness of the relaxed DVH.
#[derive(Debug, Clone, PartialEq)]
pub struct DvhRelaxation {
    bin_edges: Vec<f64>,
    steepness: f64,
}

impl DvhRelaxation {
    pub fn new(bin_edges: Vec<f64>, steepness: f64) -> Result<Self> {
        if bin_edges.len() < 2 {
            return Err(LossError::Config("need at least two bins".into()));
        }
        if !bin_edges.iter().all(|e| e.is_finite()) || bin_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(LossError::Config("bin edges must be finite and strictly increasing".into()));
        }
        if !(steepness > 0.0 && steepness.is_finite()) {
            return Err(LossError::Config(format!("steepness must be positive, got {steepness}")));
        }
        Ok(Self { bin_edges, steepness })
    }

    /// `n_bins` evenly spaced edges from `bin_min` to `bin_max` inclusive.
    pub fn uniform(n_bins: usize, bin_min: f64, bin_max: f64, steepness: f64) -> Result<Self> {
        if n_bins < 2 {
            return Err(LossError::Config("need at least two bins".into()));
        }
        let step = (bin_max - bin_min) / (n_bins - 1) as f64;
        Self::new((0..n_bins).map(|t| bin_min + step * t as f64).collect(), steepness)
    }

    pub fn with_steepness(&self, steepness: f64) -> Result<Self> {
        Self::new(self.bin_edges.clone(), steepness)
    }

    pub fn bin_edges(&self) -> &[f64] {
        &self.bin_edges
    }

    pub fn n_bins(&self) -> usize {
        self.bin_edges.len()
    }

    pub fn steepness(&self) -> f64 {
        self.steepness
    }
}

impl Default for DvhRelaxation {
    /// 80 bins at 0.5, 1.5, ..., 79.5 Gy with steepness 4 per Gy.
    fn default() -> Self {
        LossConfig::default().relaxation().expect("valid default")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(LossError::Config(format!(
                "weights must be finite and non-negative, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 10.0, beta: 10.0 }
    }
}

/// The `loss` block of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub n_bins: usize,
    pub bin_min: f64,
    pub bin_max: f64,
    pub steepness: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            beta: 10.0,
            n_bins: 80,
            bin_min: 0.5,
            bin_max: 79.5,
            steepness: 4.0,
        }
    }
}

impl LossConfig {
    pub fn relaxation(&self) -> Result<DvhRelaxation> {
        DvhRelaxation::uniform(self.n_bins, self.bin_min, self.bin_max, self.steepness)
    }

    pub fn weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        self.relaxation()?;
        self.weights()?;
        Ok(())
    }
}

fn check_mask(tape: &Tape, x: Var, mask: &Mask, what: &str) -> Result<usize> {
    let n = tape.value(x).numel();
    if mask.data().len() != n {
        return Err(LossError::Shape {
            mask: mask.data().len(),
            dose: n,
        });
    }
    match mask.count() {
        0 => Err(LossError::EmptyMask(what.into())),
        c => Ok(c),
    }
}

/// `Σ (pred − gt)² M / Σ M`.
pub fn masked_mse(tape: &mut Tape, pred: Var, gt: Var, mask: &Mask) -> Result<Var> {
    let count = check_mask(tape, pred, mask, "masked_mse")?;
    let m = tape.constant(Tensor::new(tape.shape(pred).to_vec(), mask.to_f64())?)?;
    let d = tape.sub(pred, gt)?;
    let sq = tape.square(d)?;
    let sq = tape.mul(sq, m)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / count as f64)?)
}

/// Relaxed cumulative DVH: at bin `t`, the masked mean of `sigmoid(β (D − d_t))`.
pub fn soft_dvh(tape: &mut Tape, dose: Var, mask: &Mask, relax: &DvhRelaxation) -> Result<Var> {
    check_mask(tape, dose, mask, "soft_dvh")?;
    Ok(tape.soft_dvh(dose, &mask.to_f64(), relax.bin_edges(), relax.steepness())?)
}

fn curve_distance(tape: &mut Tape, pred: Var, gt: Var, mask: &Mask, relax: &DvhRelaxation) -> Result<Var> {
    let a = soft_dvh(tape, gt, mask, relax)?;
    let b = soft_dvh(tape, pred, mask, relax)?;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    Ok(tape.sum(sq)?)
}

/// `Σ_v ‖dvh(gt, M_v) − dvh(pred, M_v)‖² / (n_v n_t)` over the structures given.
pub fn dvh_loss(
    tape: &mut Tape,
    pred: Var,
    gt: Var,
    structures: &BTreeMap<Structure, Mask>,
    relax: &DvhRelaxation,
) -> Result<Var> {
    if structures.is_empty() {
        return Err(LossError::NoStructures);
    }
    let mut total: Option<Var> = None;
    for (s, m) in structures {
        check_mask(tape, pred, m, s.name())?;
        let d = curve_distance(tape, pred, gt, m, relax)?;
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d)?,
        });
    }
    let denom = (structures.len() * relax.n_bins()) as f64;
    Ok(tape.scale(total.expect("non-empty"), 1.0 / denom)?)
}

/// `‖dvh(gt, M_d) − dvh(pred, M_d)‖² / n_t` on the possible-dose mask.
pub fn global_dvh_loss(tape: &mut Tape, pred: Var, gt: Var, mask: &Mask, relax: &DvhRelaxation) -> Result<Var> {
    check_mask(tape, pred, mask, "global_dvh_loss")?;
    let d = curve_distance(tape, pred, gt, mask, relax)?;
    Ok(tape.scale(d, 1.0 / relax.n_bins() as f64)?)
}

/// `α · masked_mse + β · global_dvh_loss`. A zero weight skips its term.
pub fn combined_loss(
    tape: &mut Tape,
    pred: Var,
    gt: Var,
    mask: &Mask,
    relax: &DvhRelaxation,
    weights: LossWeights,
) -> Result<Var> {
    weights.validate()?;
    check_mask(tape, pred, mask, "combined_loss")?;
    let mut terms = Vec::with_capacity(2);
    if weights.alpha != 0.0 {
        let mse = masked_mse(tape, pred, gt, mask)?;
        terms.push(tape.scale(mse, weights.alpha)?);
    }
    if weights.beta != 0.0 {
        let g = global_dvh_loss(tape, pred, gt, mask, relax)?;
        terms.push(tape.scale(g, weights.beta)?);
    }
    match terms.as_slice() {
        [] => Ok(tape.constant(Tensor::scalar(0.0))?),
        [t] => Ok(*t),
        [a, b] => Ok(tape.add(*a, *b)?),
        _ => unreachable!(),
    }
}

/// Value of [`combined_loss`] for two grids, without keeping a tape around.
pub fn combined_loss_value(
    pred: &Grid,
    gt: &Grid,
    mask: &Mask,
    relax: &DvhRelaxation,
    weights: LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.to_tensor())?;
    let g = tape.constant(gt.to_tensor())?;
    let l = combined_loss(&mut tape, p, g, mask, relax, weights)?;
    Ok(tape.value(l).item())
}

/// Exact cumulative DVH by counting: fraction of masked voxels receiving at
/// least each edge dose.
pub fn exact_dvh(dose: &[f64], mask: &Mask, edges: &[f64]) -> Result<Vec<f64>> {
    if mask.data().len() != dose.len() {
        return Err(LossError::Shape {
            mask: mask.data().len(),
            dose: dose.len(),
        });
    }
    let vals: Vec<f64> = mask.indices().map(|i| dose[i]).collect();
    if vals.is_empty() {
        return Err(LossError::EmptyMask("exact_dvh".into()));
    }
    let n = vals.len() as f64;
    Ok(edges
        .iter()
        .map(|&e| vals.iter().filter(|&&d| d >= e).count() as f64 / n)
        .collect())
}
