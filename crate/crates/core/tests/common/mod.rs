//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

pub mod oracles;

use dcadose::gradcheck::{check_gradients, GradCheckConfig, GradCheckReport};
use dcadose::params::{BoundParams, ParamStore};
use dcadose::phantom::{generate, random_spec, DEFAULT_VOXEL_DIMS_MM};
use dcadose::volume::{Grid, Patient};
use dcadose::tensor::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Runs `build` on a fresh tape, backpropagates, and checks every parameter
/// (or a sample) against central differences of the same objective.
pub fn fd_check<E: From<TensorError> + std::fmt::Debug>(
    params: &ParamStore,
    build: impl Fn(&mut Tape, &BoundParams) -> Result<Var, E>,
    cfg: GradCheckConfig,
) -> GradCheckReport {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape).unwrap();
    let loss = build(&mut tape, &bound).unwrap();
    tape.backward(loss).unwrap();
    let analytic = params.grads_from(&tape, &bound);
    check_gradients(
        params,
        &analytic,
        |p: &ParamStore| -> Result<f64, E> {
            let mut t = Tape::new();
            let b = p.bind(&mut t)?;
            let l = build(&mut t, &b)?;
            Ok(t.value(l).item())
        },
        &cfg,
    )
    .unwrap()
}

/// `sum(weights * x)` with fixed weights, so no gradient collapses to a constant.
pub fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var, TensorError> {
    let w = tape.constant(weights.clone())?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

/// Replaces every parameter value with a uniform draw from `[lo, hi)`.
pub fn randomize_params(store: &mut ParamStore, rng: &mut impl Rng, lo: f64, hi: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(lo..hi);
        }
    }
}

/// A random 8³-style phantom and a noisy prediction of its dose.
pub fn phantom_with_prediction(seed: u64, size: usize, noise_gy: f64) -> (Patient, Grid) {
    let p = generate(&random_spec(format!("case_{seed}"), [size; 3], DEFAULT_VOXEL_DIMS_MM, seed)).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let pred = Grid::from_fn(p.shape(), |i, j, k| p.dose.get(i, j, k) + r.random_range(-noise_gy..noise_gy));
    (p, pred)
}
