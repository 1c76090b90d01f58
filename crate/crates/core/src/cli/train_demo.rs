use std::time::Instant;

use anyhow::{bail, Context};
use serde::Serialize;

use super::evaluate::report;
use super::{load_cohort, sig6, Run};
use crate::phantom::generate_cohort;
use crate::scaffold::Scaffold;
use crate::train::{train, Objective, StepRecord};
use crate::volume::{assemble_input, write_dose, Grid, Patient, PreparedPatient};

#[derive(Debug, Serialize)]
struct HeldOut {
    id: String,
    dose_error_gy: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    objective: Objective,
    steps: usize,
    train_ids: Vec<String>,
    val_ids: Vec<String>,
    initial_loss: f64,
    final_loss: f64,
    loss_ratio: f64,
    held_out: Vec<HeldOut>,
    dose_score_gy: f64,
    dvh_score_gy: f64,
    mean_r_va: f64,
    mean_r_pa: f64,
}

#[derive(Debug, Serialize)]
struct ComparisonRun {
    objective: Objective,
    dose_score_gy: f64,
    dvh_score_gy: f64,
    initial_loss: f64,
    final_loss: f64,
}

#[derive(Debug, Serialize)]
struct Comparison {
    runs: Vec<ComparisonRun>,
}

fn cohort(run: &mut Run) -> anyhow::Result<(Vec<Patient>, Vec<Patient>)> {
    let d = run.config.data.clone();
    let mut all = match &d.dir {
        Some(dir) => {
            run.input(dir);
            load_cohort(dir)?
        }
        None => generate_cohort(d.n_train + d.n_val, d.size, d.voxel_dims_mm, d.phantom_seed)?,
    };
    if all.len() < d.n_train + d.n_val {
        bail!(
            "cohort has {} patients, data.n_train + data.n_val = {}",
            all.len(),
            d.n_train + d.n_val
        );
    }
    if d.n_val == 0 {
        bail!("data.n_val must be at least 1 to evaluate held-out patients");
    }
    all.truncate(d.n_train + d.n_val);
    let val = all.split_off(d.n_train);
    Ok((all, val))
}

fn write_trace(path: &std::path::Path, trace: &[StepRecord]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn run_one(
    run: &mut Run,
    objective: Objective,
    train_set: &[PreparedPatient],
    val: &[Patient],
    prefix: &str,
) -> anyhow::Result<ComparisonRun> {
    let mut cfg = run.config.clone();
    cfg.train.objective = objective;
    let setup = cfg.loss_setup()?;
    let net = Scaffold::new(cfg.model.clone())?;
    let params = net.init_params(train_set[0].shape(), cfg.train.seed)?;
    println!(
        "training {objective:?}: {} steps on {} patients, {} parameters",
        cfg.train.steps,
        train_set.len(),
        params.numel()
    );
    let started = Instant::now();
    let out = match train(&net, params, train_set, &cfg.train, &setup) {
        Ok(o) => o,
        Err(crate::train::TrainError::Diverged { step, patient, trace }) => {
            write_trace(&run.output(format!("{prefix}loss_trace.csv")), &trace)?;
            bail!("training diverged at step {step} on {patient}; partial trace written");
        }
        Err(e) => return Err(e.into()),
    };
    println!(
        "  loss {} -> {} (ratio {}) in {} s",
        sig6(out.initial_loss),
        sig6(out.final_loss),
        sig6(out.final_loss / out.initial_loss),
        sig6(started.elapsed().as_secs_f64())
    );

    out.params
        .save(&run.out.join(format!("{prefix}checkpoint")))
        .context("cannot write checkpoint")?;
    run.output(format!("{prefix}checkpoint/{}", crate::params::CHECKPOINT_MANIFEST));
    run.output(format!("{prefix}checkpoint/{}", crate::params::CHECKPOINT_DATA));
    write_trace(&run.output(format!("{prefix}loss_trace.csv")), &out.trace)?;

    let preds = val
        .iter()
        .map(|p| {
            let y = net.predict(&out.params, &assemble_input(&p.prepare()))?;
            let g = Grid::new(p.shape(), y.into_data())?;
            write_dose(&run.output(format!("{prefix}predictions/{}/dose.csv", p.id)), &g)?;
            Ok(g)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let rep = report(run, val, &preds, prefix, &format!("{objective:?}"))?;
    let summary = Summary {
        objective,
        steps: cfg.train.steps,
        train_ids: train_set.iter().map(|p| p.id.clone()).collect(),
        val_ids: val.iter().map(|p| p.id.clone()).collect(),
        initial_loss: out.initial_loss,
        final_loss: out.final_loss,
        loss_ratio: out.final_loss / out.initial_loss,
        held_out: rep
            .patients
            .iter()
            .map(|p| HeldOut {
                id: p.id.clone(),
                dose_error_gy: p.dose_error_gy,
            })
            .collect(),
        dose_score_gy: rep.dose_score_gy,
        dvh_score_gy: rep.dvh_score_gy,
        mean_r_va: rep.mean_r_va,
        mean_r_pa: rep.mean_r_pa,
    };
    run.write_json(&format!("{prefix}summary.json"), &summary)?;
    Ok(ComparisonRun {
        objective,
        dose_score_gy: rep.dose_score_gy,
        dvh_score_gy: rep.dvh_score_gy,
        initial_loss: out.initial_loss,
        final_loss: out.final_loss,
    })
}

pub(super) fn train_demo(run: &mut Run, loss_ablation: bool) -> anyhow::Result<()> {
    let (train_patients, val) = cohort(run)?;
    let train_set: Vec<PreparedPatient> = train_patients.iter().map(Patient::prepare).collect();
    if !loss_ablation {
        let objective = run.config.train.objective;
        run_one(run, objective, &train_set, &val, "")?;
        return Ok(());
    }
    let mut runs = Vec::new();
    for objective in [Objective::GlobalDvh, Objective::StructuralDvh] {
        let prefix = match objective {
            Objective::GlobalDvh => "global_dvh/",
            Objective::StructuralDvh => "structural_dvh/",
        };
        runs.push(run_one(run, objective, &train_set, &val, prefix)?);
    }
    println!("objective        S_DVH (Gy)  S_Dose (Gy)");
    for r in &runs {
        println!("{:<15}  {:>10}  {:>11}", format!("{:?}", r.objective), sig6(r.dvh_score_gy), sig6(r.dose_score_gy));
    }
    run.write_json("comparison.json", &Comparison { runs })?;
    Ok(())
}
