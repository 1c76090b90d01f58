use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{sig6, GradTarget, Run, ValidationFailure};
use crate::dca::{DcaBlock, DcaConfig};
use crate::gradcheck::{check_gradients, tape_gradients, tape_value, GradCheckConfig, GradCheckReport};
use crate::losses::{self, DvhRelaxation, LossWeights};
use crate::params::{BoundParams, ParamStore};
use crate::phantom::{generate, random_spec, DEFAULT_VOXEL_DIMS_MM};
use crate::scaffold::{Scaffold, ScaffoldConfig};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::train::{patient_loss, LossSetup};
use crate::volume::assemble_input;

/// Factor applied to the analytic gradients by `--corrupt-backward`.
const CORRUPTION: f64 = 1.5;

#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub target: GradTarget,
    pub step: f64,
    pub rel_tol: f64,
    pub samples: usize,
    pub pass_fraction: f64,
    pub required_pass_fraction: f64,
    pub passed: bool,
    pub params: Vec<ParamSummary>,
}

impl GradcheckSummary {
    fn new(target: GradTarget, cfg: &GradCheckConfig, required: f64, report: &GradCheckReport) -> Self {
        let pass_fraction = report.pass_fraction();
        Self {
            target,
            step: cfg.step,
            rel_tol: cfg.rel_tol,
            samples: report.samples.len(),
            pass_fraction,
            required_pass_fraction: required,
            passed: pass_fraction >= required,
            params: report
                .per_param_max()
                .into_iter()
                .map(|(name, max_rel_err, checked)| ParamSummary {
                    name,
                    checked,
                    max_rel_err,
                })
                .collect(),
        }
    }
}

fn check<E: From<TensorError>>(
    params: &ParamStore,
    build: impl Fn(&mut Tape, &BoundParams) -> Result<Var, E>,
    cfg: &GradCheckConfig,
    corrupt: bool,
) -> Result<GradCheckReport, E> {
    let mut analytic = tape_gradients(params, &build)?;
    if corrupt {
        for (_, t) in analytic.iter_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= CORRUPTION);
        }
    }
    check_gradients(params, &analytic, |p: &ParamStore| tape_value(p, &build), cfg)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// DCA block with channels (4, 8, 16) on a 16³ grid: 200 sampled parameters
/// at rel 1e-4, 99% required. Fusion scales are drawn away from zero so the
/// attention branches carry gradient.
///
/// Key biases shift every score of a softmax row equally, so their gradient is
/// exactly zero and the central difference is pure roundoff (about 1e-9 on this
/// objective); the 1e-5 floor keeps those comparisons absolute.
fn dca(seed: u64, corrupt: bool) -> anyhow::Result<GradcheckSummary> {
    let config = DcaConfig::new(vec![4, 8, 16], [16; 3], 2)?;
    let block = DcaBlock::new(config.clone(), "dca.")?;
    let mut params = block.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (name, t) in params.iter_mut() {
        if name.starts_with("dca.fusion.") && name.ends_with(".scale") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    let inputs: Vec<Tensor> = (0..config.n_stages())
        .map(|i| uniform(&mut rng, &config.stage_shape(i), -1.0, 1.0))
        .collect();
    let weights: Vec<Tensor> = inputs.iter().map(|x| uniform(&mut rng, x.shape(), -1.0, 1.0)).collect();
    let build = |tape: &mut Tape, p: &BoundParams| -> anyhow::Result<Var> {
        let xs = inputs.iter().map(|x| tape.constant(x.clone())).collect::<Result<Vec<_>, _>>()?;
        let ys = block.forward(tape, p, &xs)?;
        let mut total = tape.constant(Tensor::scalar(0.0))?;
        for (y, w) in ys.into_iter().zip(&weights) {
            let w = tape.constant(w.clone())?;
            let yw = tape.mul(y, w)?;
            let s = tape.sum(yw)?;
            total = tape.add(total, s)?;
        }
        Ok(total)
    };
    let cfg = GradCheckConfig {
        floor: 1e-5,
        samples: Some(200),
        seed,
        ..Default::default()
    };
    let report = check(&params, build, &cfg, corrupt)?;
    Ok(GradcheckSummary::new(GradTarget::Dca, &cfg, 0.99, &report))
}

/// Every loss (masked MSE, structure DVH, global DVH, combined) with respect
/// to every voxel of a noisy prediction on an 8³ phantom, rel 1e-5, all must pass.
fn loss(seed: u64, corrupt: bool) -> anyhow::Result<GradcheckSummary> {
    let patient = generate(&random_spec("gradcheck", [8; 3], DEFAULT_VOXEL_DIMS_MM, seed))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let gt = patient.dose.to_tensor();
    let pred = Tensor::new(
        gt.shape().to_vec(),
        gt.data().iter().map(|d| (d + rng.random_range(-3.0..3.0)).max(0.0)).collect(),
    )?;
    let mut params = ParamStore::new();
    params.insert("pred", pred);
    let relax = DvhRelaxation::default();
    let mask = &patient.possible_dose_mask;
    let build = |tape: &mut Tape, p: &BoundParams| -> anyhow::Result<Var> {
        let pred = p.get("pred");
        let gt = tape.constant(gt.clone())?;
        let terms = [
            losses::masked_mse(tape, pred, gt, mask)?,
            losses::dvh_loss(tape, pred, gt, &patient.structures, &relax)?,
            losses::global_dvh_loss(tape, pred, gt, mask, &relax)?,
            losses::combined_loss(tape, pred, gt, mask, &relax, LossWeights::default())?,
        ];
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        Ok(total)
    };
    let cfg = GradCheckConfig {
        rel_tol: 1e-5,
        floor: 1e-10,
        samples: None,
        seed,
        ..Default::default()
    };
    let report = check(&params, build, &cfg, corrupt)?;
    Ok(GradcheckSummary::new(GradTarget::Loss, &cfg, 1.0, &report))
}

/// Full scaffold (with DCA, fusion scales drawn away from zero) and the
/// combined loss on an 8³ phantom: 100 sampled parameters at rel 1e-3, 99% required.
fn net(model: &ScaffoldConfig, seed: u64, corrupt: bool) -> anyhow::Result<GradcheckSummary> {
    let config = ScaffoldConfig {
        use_dca: true,
        ..model.clone()
    };
    let net = Scaffold::new(config)?;
    let patient = generate(&random_spec("gradcheck", [8; 3], DEFAULT_VOXEL_DIMS_MM, seed))?.prepare();
    let mut params = net.init_params(patient.shape(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e7);
    for (name, t) in params.iter_mut() {
        if name.starts_with("dca.fusion.") && name.ends_with(".scale") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    let input = assemble_input(&patient);
    let setup = LossSetup::default();
    let build = |tape: &mut Tape, p: &BoundParams| -> anyhow::Result<Var> {
        let x = tape.constant(input.clone())?;
        let y = net.forward(tape, p, x)?;
        Ok(patient_loss(tape, y, &patient, &setup)?)
    };
    let cfg = GradCheckConfig {
        rel_tol: 1e-3,
        samples: Some(100),
        seed,
        ..Default::default()
    };
    let report = check(&params, build, &cfg, corrupt)?;
    Ok(GradcheckSummary::new(GradTarget::Net, &cfg, 0.99, &report))
}

/// Runs one gradient-check target without touching the filesystem.
pub fn gradcheck_target(
    target: GradTarget,
    model: &ScaffoldConfig,
    seed: u64,
    corrupt: bool,
) -> anyhow::Result<GradcheckSummary> {
    match target {
        GradTarget::Dca => dca(seed, corrupt),
        GradTarget::Loss => loss(seed, corrupt),
        GradTarget::Net => net(model, seed, corrupt),
    }
}

pub(super) fn gradcheck(run: &mut Run, target: GradTarget, corrupt: bool) -> anyhow::Result<()> {
    let summary = gradcheck_target(target, &run.config.model, run.seed, corrupt)?;
    let width = summary.params.iter().map(|p| p.name.len()).max().unwrap_or(0);
    for p in &summary.params {
        println!("{:<width$}  {:>4} checked  max rel err {}", p.name, p.checked, sig6(p.max_rel_err));
    }
    println!(
        "{}: {}% of {} samples below {} (required {}%)",
        target.name(),
        sig6(100.0 * summary.pass_fraction),
        summary.samples,
        sig6(summary.rel_tol),
        sig6(100.0 * summary.required_pass_fraction)
    );
    run.write_json("gradcheck.json", &summary)?;
    if summary.passed {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(ValidationFailure(format!("{} gradient check below threshold", target.name())).into())
    }
}
