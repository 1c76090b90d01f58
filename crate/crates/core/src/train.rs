//! Optimizer, learning-rate schedule and the per-patient training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dca::DcaError;
use crate::losses::{self, DvhRelaxation, LossError, LossWeights};
use crate::params::ParamStore;
use crate::scaffold::{Scaffold, ScaffoldError};
use crate::tensor::{Tape, TensorError, Var};
use crate::volume::{assemble_input, augment, PreparedPatient};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training cohort is empty")]
    EmptyCohort,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (patient {patient})")]
    Diverged {
        step: usize,
        patient: String,
        trace: Vec<StepRecord>,
    },
    #[error(transparent)]
    Scaffold(#[from] ScaffoldError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Which DVH term joins the masked MSE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `α · MSE + β · global DVH loss` on the possible-dose mask.
    GlobalDvh,
    /// `α · MSE + β · per-structure DVH loss`.
    StructuralDvh,
}

/// The `train` block of a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First restart period of the cosine schedule, in steps.
    pub restart_period: usize,
    /// Period growth factor after each restart.
    pub restart_mult: usize,
    pub seed: u64,
    pub steps: usize,
    pub augment: bool,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            min_lr: 2e-5,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            restart_period: 100,
            restart_mult: 1,
            seed: 42,
            steps: 200,
            augment: true,
            objective: Objective::GlobalDvh,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr.is_finite() && self.min_lr.is_finite() && self.min_lr >= 0.0 && self.min_lr <= self.lr) {
            return bad("learning rates must satisfy 0 <= min_lr <= lr");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("moment decays must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if self.restart_period == 0 || self.restart_mult == 0 {
            return bad("restart period and multiplier must be at least 1");
        }
        Ok(())
    }
}

/// Cosine annealing with warm restarts:
/// `min + (base − min)(1 + cos(π t / T)) / 2`, `t` the step within the current period.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let (mut t, mut period) = (step, cfg.restart_period);
    while t >= period {
        t -= period;
        period *= cfg.restart_mult;
    }
    let phase = std::f64::consts::PI * t as f64 / period as f64;
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + phase.cos())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; `grads` must hold the same names in the same order as `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((_, p), (_, g)), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Relaxation and weights shared by every loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSetup {
    pub relaxation: DvhRelaxation,
    pub weights: LossWeights,
    pub objective: Objective,
}

impl Default for LossSetup {
    fn default() -> Self {
        Self {
            relaxation: DvhRelaxation::default(),
            weights: LossWeights::default(),
            objective: Objective::GlobalDvh,
        }
    }
}

/// Builds the training objective for one patient on `tape`; `pred` is `[1, H, W, D]`.
pub fn patient_loss(tape: &mut Tape, pred: Var, patient: &PreparedPatient, setup: &LossSetup) -> Result<Var> {
    let shape = patient.shape();
    let pred = tape.reshape(pred, &shape)?;
    let gt = tape.constant(patient.dose.to_tensor())?;
    let mask = &patient.possible_dose_mask;
    let w = setup.weights;
    Ok(match setup.objective {
        Objective::GlobalDvh => losses::combined_loss(tape, pred, gt, mask, &setup.relaxation, w)?,
        Objective::StructuralDvh => {
            let mse = losses::masked_mse(tape, pred, gt, mask)?;
            let mse = tape.scale(mse, w.alpha)?;
            let dvh = losses::dvh_loss(tape, pred, gt, &patient.structures, &setup.relaxation)?;
            let dvh = tape.scale(dvh, w.beta)?;
            tape.add(mse, dvh)?
        }
    })
}

fn loss_and_grads(
    net: &Scaffold,
    params: &ParamStore,
    patient: &PreparedPatient,
    setup: &LossSetup,
    want_grads: bool,
) -> Result<(f64, Option<ParamStore>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let x = tape.constant(assemble_input(patient))?;
    let pred = net.forward(&mut tape, &bound, x)?;
    let loss = patient_loss(&mut tape, pred, patient, setup)?;
    let value = tape.value(loss).item();
    if !want_grads || !value.is_finite() {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    Ok((value, Some(params.grads_from(&tape, &bound))))
}

/// Loss of one patient without augmentation.
pub fn evaluate_loss(net: &Scaffold, params: &ParamStore, patient: &PreparedPatient, setup: &LossSetup) -> Result<f64> {
    Ok(loss_and_grads(net, params, patient, setup, false)?.0)
}

/// Mean un-augmented loss over a cohort. Patients are evaluated on the
/// current rayon pool and summed in cohort order.
pub fn cohort_loss(net: &Scaffold, params: &ParamStore, cohort: &[PreparedPatient], setup: &LossSetup) -> Result<f64> {
    if cohort.is_empty() {
        return Err(TrainError::EmptyCohort);
    }
    let losses = cohort
        .par_iter()
        .map(|p| evaluate_loss(net, params, p, setup))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub patient: String,
    pub lr: f64,
    pub loss: f64,
    pub augment_seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: ParamStore,
    pub trace: Vec<StepRecord>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// SplitMix64 finalizer over `seed + stream`; decorrelates per-step seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn is_non_finite(e: &TrainError) -> bool {
    use TensorError::NonFinite;
    matches!(
        e,
        TrainError::Tensor(NonFinite { .. })
            | TrainError::Scaffold(ScaffoldError::Tensor(NonFinite { .. }))
            | TrainError::Scaffold(ScaffoldError::Dca(DcaError::Tensor(NonFinite { .. })))
            | TrainError::Loss(LossError::Tensor(NonFinite { .. }))
    )
}

/// Batch-size-1 training. Each epoch visits the cohort in a seeded shuffled
/// order; with augmentation on, step `s` augments with `derive_seed(seed, s)`.
/// Initial and final losses are [`cohort_loss`] before and after training.
pub fn train(
    net: &Scaffold,
    mut params: ParamStore,
    cohort: &[PreparedPatient],
    cfg: &TrainConfig,
    setup: &LossSetup,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if cohort.is_empty() {
        return Err(TrainError::EmptyCohort);
    }
    let initial_loss = cohort_loss(net, &params, cohort, setup)?;
    let mut adam = Adam::new(&params, cfg);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step % cohort.len() == 0 {
            order = (0..cohort.len()).collect();
            order.shuffle(&mut order_rng);
        }
        let patient = &cohort[order[step % cohort.len()]];
        let augment_seed = cfg.augment.then(|| derive_seed(cfg.seed, step as u64));
        let augmented;
        let sample = match augment_seed {
            Some(s) => {
                augmented = augment(patient, s);
                &augmented
            }
            None => patient,
        };
        let lr = lr_at(step, cfg);
        // Any non-finite intermediate is reported as divergence, not as a tensor error.
        let (loss, grads) = match loss_and_grads(net, &params, sample, setup, true) {
            Err(e) if is_non_finite(&e) => (f64::NAN, None),
            r => r?,
        };
        trace.push(StepRecord {
            step,
            patient: patient.id.clone(),
            lr,
            loss,
            augment_seed,
        });
        match grads {
            Some(g) if g.iter().all(|(_, t)| t.is_finite()) => adam.step(&mut params, &g, lr),
            _ => {
                return Err(TrainError::Diverged {
                    step,
                    patient: patient.id.clone(),
                    trace,
                })
            }
        }
    }
    let final_loss = cohort_loss(net, &params, cohort, setup)?;
    Ok(TrainOutput {
        params,
        trace,
        initial_loss,
        final_loss,
    })
}
