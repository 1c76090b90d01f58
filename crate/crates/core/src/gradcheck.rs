//! Central finite-difference gradient checking.
//!
//! The harness only evaluates the scalar objective; it never looks at the
//! tape, so it stays independent of the backward pass it is checking.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// A sample passes when its relative error is below this.
    pub rel_tol: f64,
    /// Denominator floor so that analytically-zero gradients compare cleanly.
    pub floor: f64,
    /// Number of scalar parameters to sample; `None` checks every one.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-4,
            floor: 1e-8,
            samples: Some(200),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<SampleCheck>,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 1.0;
        }
        self.samples.iter().filter(|s| s.passed).count() as f64 / self.samples.len() as f64
    }

    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }

    /// Maximum relative error per parameter tensor, in first-seen order.
    pub fn per_param_max(&self) -> Vec<(String, f64, usize)> {
        let mut out: Vec<(String, f64, usize)> = Vec::new();
        for s in &self.samples {
            match out.iter_mut().find(|(n, _, _)| *n == s.param) {
                Some(e) => {
                    e.1 = e.1.max(s.rel_err);
                    e.2 += 1;
                }
                None => out.push((s.param.clone(), s.rel_err, 1)),
            }
        }
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients of `objective` at `params` against central
/// differences on a seeded sample of scalar parameters.
pub fn check_gradients<E>(
    params: &ParamStore,
    analytic: &ParamStore,
    mut objective: impl FnMut(&ParamStore) -> Result<f64, E>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E> {
    let layout: Vec<(String, usize)> = params.iter().map(|(n, t)| (n.to_string(), t.numel())).collect();
    let total: usize = layout.iter().map(|(_, n)| n).sum();
    let picks: Vec<usize> = match cfg.samples {
        Some(k) if k < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut v = index::sample(&mut rng, total, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..total).collect(),
    };

    let mut work = params.clone();
    let mut samples = Vec::with_capacity(picks.len());
    for flat in picks {
        let (mut name, mut idx) = (String::new(), flat);
        for (n, len) in &layout {
            if idx < *len {
                name = n.clone();
                break;
            }
            idx -= len;
        }
        let orig = params.get(&name).expect("layout name").data()[idx];
        work.get_mut(&name).expect("layout name").data_mut()[idx] = orig + cfg.step;
        let plus = objective(&work)?;
        work.get_mut(&name).expect("layout name").data_mut()[idx] = orig - cfg.step;
        let minus = objective(&work)?;
        work.get_mut(&name).expect("layout name").data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let a = analytic
            .get(&name)
            .map(|t| t.data()[idx])
            .unwrap_or(0.0);
        let rel_err = relative_error(a, numeric, cfg.floor);
        samples.push(SampleCheck {
            param: name,
            index: idx,
            analytic: a,
            numeric,
            rel_err,
            passed: rel_err < cfg.rel_tol,
        });
    }
    Ok(GradCheckReport { samples })
}

/// Value of a scalar objective built on a fresh tape.
pub fn tape_value<E: From<TensorError>>(
    params: &ParamStore,
    build: impl Fn(&mut Tape, &BoundParams) -> Result<Var, E>,
) -> Result<f64, E> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let out = build(&mut tape, &bound)?;
    Ok(tape.value(out).item())
}

/// Reverse-mode gradients of a scalar objective built on a fresh tape.
pub fn tape_gradients<E: From<TensorError>>(
    params: &ParamStore,
    build: impl Fn(&mut Tape, &BoundParams) -> Result<Var, E>,
) -> Result<ParamStore, E> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;
    let out = build(&mut tape, &bound)?;
    tape.backward(out)?;
    Ok(params.grads_from(&tape, &bound))
}
