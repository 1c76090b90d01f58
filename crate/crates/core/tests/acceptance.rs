//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the lines always reach stdout:
//! `cargo test --test acceptance`.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use common::{oracles, phantom_with_prediction, randomize_params, random_tensor, rng};
use dcadose::cli::{gradcheck_target, GradTarget};
use dcadose::dca::{DcaBlock, DcaConfig};
use dcadose::losses::{combined_loss, dvh_loss, global_dvh_loss, masked_mse, soft_dvh, DvhRelaxation, LossWeights};
use dcadose::metrics::{
    acceptance_rates, dose_error, dvh_criteria, dvh_score, near_max_index, patient_acceptance, volume_acceptance,
    EvalCase,
};
use dcadose::params::ParamStore;
use dcadose::phantom::{generate_cohort, DEFAULT_VOXEL_DIMS_MM};
use dcadose::scaffold::{Scaffold, ScaffoldConfig};
use dcadose::tensor::{Tape, Tensor, Var};
use dcadose::train::{train, LossSetup, TrainConfig};
use dcadose::volume::{assemble_input, Grid, Mask, Patient, Structure};
use rand::Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let s = gradcheck_target(GradTarget::Dca, &ScaffoldConfig::default(), 42, false).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    check(
        s.samples == 200 && s.step == 1e-4 && s.rel_tol == 1e-4 && s.pass_fraction >= 0.99 && secs < 60.0,
        format!("{} samples, {:.1}% pass at rel 1e-4, {secs:.1} s", s.samples, 100.0 * s.pass_fraction),
    )
}

fn attention_oracles() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for i in 0..25u64 {
        let heads = r.random_range(1..=2);
        let n = r.random_range(2..=3);
        let channels: Vec<usize> = (0..n).map(|_| heads * r.random_range(1..=4)).collect();
        let coarse = 1 << (n - 1);
        let base = [coarse * r.random_range(1..=2), coarse * r.random_range(1..=2), coarse * 2];
        let block = DcaBlock::new(DcaConfig::new(channels, base, heads).unwrap(), "dca.").unwrap();
        let mut params = block.init_params(i);
        randomize_params(&mut params, &mut r, -1.0, 1.0);
        let p = block.config.tokens();
        let tokens: Vec<Tensor> = block.config.channels.iter().map(|&c| random_tensor(&mut r, &[p, c], -2.0, 2.0)).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape).unwrap();
        let vars: Vec<Var> = tokens.iter().map(|t| tape.constant(t.clone()).unwrap()).collect();
        let cca = block.channel_cross_attention(&mut tape, &bound, &vars).unwrap();
        let sca = block.spatial_cross_attention(&mut tape, &bound, &vars).unwrap();
        let want_c = oracles::channel_cross_attention(&tokens, &params, "dca.");
        let want_s = oracles::spatial_cross_attention(&tokens, &params, "dca.", heads);
        for (v, w) in cca.iter().zip(&want_c).chain(sca.iter().zip(&want_s)) {
            worst = worst.max(max_abs_diff(tape.value(*v), w));
        }
    }
    check(worst <= 1e-12, format!("25 CCA + 25 SCA instances, max abs diff {worst:.2e}"))
}

fn loss_identities() -> Outcome {
    let relax = DvhRelaxation::default();
    let mut nonzero = Vec::new();
    for p in generate_cohort(10, 16, DEFAULT_VOXEL_DIMS_MM, 3).unwrap() {
        let mut tape = Tape::new();
        let pred = tape.param(p.dose.to_tensor()).unwrap();
        let gt = tape.constant(p.dose.to_tensor()).unwrap();
        let m = &p.possible_dose_mask;
        let values = [
            masked_mse(&mut tape, pred, gt, m).unwrap(),
            dvh_loss(&mut tape, pred, gt, &p.structures, &relax).unwrap(),
            global_dvh_loss(&mut tape, pred, gt, m, &relax).unwrap(),
            combined_loss(&mut tape, pred, gt, m, &relax, LossWeights::default()).unwrap(),
        ];
        for v in values {
            let x = tape.value(v).item();
            if x != 0.0 {
                nonzero.push(format!("{}: {x}", p.id));
            }
        }
    }
    check(nonzero.is_empty(), format!("10 phantoms x 4 losses, non-zero: {nonzero:?}"))
}

fn dvh_convergence() -> Outcome {
    let relax = DvhRelaxation::default().with_steepness(50.0).unwrap();
    let edges = relax.bin_edges().to_vec();
    let (lo, hi) = (edges[0] - 5.0, edges[edges.len() - 1] + 5.0);
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let shape = [8, 8, 8];
        let dose = Grid::from_fn(shape, |_, _, _| loop {
            let d: f64 = r.random_range(lo..hi);
            if edges.iter().all(|e| (d - e).abs() >= 0.5) {
                break d;
            }
        });
        let mut mask = Mask::from_fn(shape, |_, _, _| r.random::<f64>() < 0.5);
        mask.data_mut()[0] = true;
        let mut tape = Tape::new();
        let d = tape.constant(dose.to_tensor()).unwrap();
        let c = soft_dvh(&mut tape, d, &mask, &relax).unwrap();
        let soft = tape.value(c).data().to_vec();
        let n = mask.count() as f64;
        for (t, e) in edges.iter().enumerate() {
            let exact = mask.indices().filter(|&v| dose.data()[v] > *e).count() as f64 / n;
            worst = worst.max((soft[t] - exact).abs());
        }
    }
    check(worst < 0.01, format!("beta 50, {} bins x 10 fields, max deviation {worst:.2e}", edges.len()))
}

fn metric_oracles() -> Outcome {
    let (gts, preds): (Vec<Patient>, Vec<Grid>) = (0..20).map(|s| phantom_with_prediction(s, 8, 6.0)).unzip();
    let cases: Vec<EvalCase> = gts.iter().zip(&preds).map(|(g, p)| EvalCase::new(g, p)).collect();
    let mut worst: f64 = 0.0;
    for (g, p) in gts.iter().zip(&preds) {
        let e = dose_error(p, &g.dose, &g.possible_dose_mask).unwrap();
        worst = worst.max((e - oracles::masked_mean_abs(p, &g.dose, &g.possible_dose_mask)).abs());
        for (&s, m) in &g.structures {
            let got = dvh_criteria(p, m, s.kind(), g.voxel_dims_mm).unwrap();
            let want = oracles::criteria(p, m, s, g.voxel_dims_mm);
            if got.entries().len() != want.len() {
                return Err(format!("{s}: {} criteria, oracle has {}", got.entries().len(), want.len()));
            }
            for (a, b) in got.entries().iter().zip(&want) {
                worst = worst.max((a.1 - b).abs());
            }
        }
    }
    let o = oracles::cohort(&preds, &gts, 3.0);
    worst = worst.max((dvh_score(&cases).unwrap() - o.dvh_score).abs());
    let rates = acceptance_rates(&cases, 3.0).unwrap();
    worst = worst.max((rates.mean_r_pa - o.mean_r_pa).abs());
    worst = worst.max((rates.mean_r_va - o.mean_r_va).abs());
    for r in &rates.r_va {
        worst = worst.max((r.rate - o.r_va[&r.structure]).abs());
    }
    let idx = near_max_index([3.5, 3.5, 2.0]);
    check(
        worst <= 1e-12 && idx == 4,
        format!("20 patients, max abs diff {worst:.2e}, D0.1cc index {idx}"),
    )
}

fn threshold_semantics() -> Outcome {
    let mut patients = generate_cohort(3, 8, DEFAULT_VOXEL_DIMS_MM, 6).unwrap();
    for p in &mut patients {
        let full = Mask::full(p.shape());
        p.possible_dose_mask = full.clone();
        p.structures = Structure::ALL.iter().map(|&s| (s, full.clone())).collect();
    }
    let mut bad = Vec::new();
    for (offset, want) in [(2.9, true), (3.1, false)] {
        for p in &patients {
            let pred = p.dose.map(|d| d + offset);
            let c = EvalCase::new(p, &pred);
            for &s in &Structure::ALL {
                if volume_acceptance(&c, s, 3.0).unwrap() != want {
                    bad.push(format!("{} {s} +{offset}", p.id));
                }
            }
            if patient_acceptance(&c, 3.0).unwrap() != want {
                bad.push(format!("{} PA +{offset}", p.id));
            }
        }
    }
    check(bad.is_empty(), format!("+2.9 Gy accepted, +3.1 Gy rejected on 3 full-mask phantoms; wrong: {bad:?}"))
}

fn identity_init() -> Outcome {
    let data: Vec<_> = generate_cohort(2, 16, DEFAULT_VOXEL_DIMS_MM, 8)
        .unwrap()
        .iter()
        .map(|p| p.prepare())
        .collect();
    let net = |use_dca| Scaffold::new(ScaffoldConfig { use_dca, ..Default::default() }).unwrap();
    let zeroed = |mut p: ParamStore| {
        for (name, t) in p.iter_mut() {
            if name.starts_with("dca.fusion.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        p
    };
    let with = zeroed(net(true).init_params([16; 3], 42).unwrap());
    let without = net(false).init_params([16; 3], 42).unwrap();
    let x = assemble_input(&data[0]);
    let a = net(true).predict(&with, &x).unwrap();
    let b = net(false).predict(&without, &x).unwrap();
    let bitwise = a.data().iter().zip(b.data()).all(|(u, v)| u.to_bits() == v.to_bits());
    let cfg = TrainConfig {
        steps: 1,
        augment: false,
        ..Default::default()
    };
    let setup = LossSetup::default();
    let la = train(&net(true), with, &data, &cfg, &setup).unwrap().trace[0].loss;
    let lb = train(&net(false), without, &data, &cfg, &setup).unwrap().trace[0].loss;
    check(
        bitwise && la.to_bits() == lb.to_bits(),
        format!("outputs bit-identical: {bitwise}, first-step loss {la} vs {lb}"),
    )
}

fn bin(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dcadose"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if out.status.success() {
        Ok(stdout)
    } else {
        Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Five training phantoms and one held out at 32³, default model and schedule, seed 42.
fn toy_config(dir: &Path) -> PathBuf {
    let path = dir.join("toy.json");
    fs::write(
        &path,
        r#"{
  "train": {"seed": 42, "steps": 200, "lr": 2e-4, "min_lr": 2e-5, "restart_period": 100, "augment": false},
  "loss": {"alpha": 10.0, "beta": 10.0},
  "data": {"n_train": 5, "n_val": 1, "size": 32, "phantom_seed": 42}
}"#,
    )
    .unwrap();
    path
}

fn toy_training(dir: &Path) -> Outcome {
    let cfg = toy_config(dir);
    let out = dir.join("toy");
    let t0 = Instant::now();
    bin(&["--config", s(&cfg), "train-demo", "--out", s(&out)])?;
    let elapsed = t0.elapsed();
    let summary = json(&out.join("summary.json"))?;
    let ratio = summary["loss_ratio"].as_f64().ok_or("summary lacks loss_ratio")?;
    let held = summary["held_out"][0]["dose_error_gy"].as_f64().ok_or("summary lacks held_out")?;
    check(
        ratio <= 0.10 && held < 3.5 && elapsed < Duration::from_secs(600),
        format!(
            "final/initial loss {ratio:.4} (need <= 0.10), held-out MAE {held:.3} Gy (need < 3.5), {:.0} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn loss_ablation(dir: &Path) -> Outcome {
    let cfg = toy_config(dir);
    let out = dir.join("ablation");
    bin(&["--config", s(&cfg), "train-demo", "--loss-ablation", "--out", s(&out)])?;
    let c = json(&out.join("comparison.json"))?;
    let runs = c["runs"].as_array().ok_or("comparison.json lacks runs")?;
    let objectives: Vec<&str> = runs.iter().filter_map(|r| r["objective"].as_str()).collect();
    let scored = runs
        .iter()
        .all(|r| r["dvh_score_gy"].as_f64().is_some_and(f64::is_finite) && r["dose_score_gy"].as_f64().is_some_and(f64::is_finite));
    let detail = runs
        .iter()
        .map(|r| format!("{} S_DVH {} S_Dose {}", r["objective"], r["dvh_score_gy"], r["dose_score_gy"]))
        .collect::<Vec<_>>()
        .join("; ");
    check(objectives == ["global_dvh", "structural_dvh"] && scored, detail)
}

/// Relative path and bytes of every file under `dir`, manifest timestamps removed.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.file_name().unwrap() == "manifest.json" {
                let mut v: Value = serde_json::from_slice(&bytes).unwrap();
                let m = v.as_object_mut().unwrap();
                m.remove("started_at");
                m.remove("finished_at");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            files.push((p.strip_prefix(dir).unwrap().to_string_lossy().into_owned(), bytes));
        }
    }
    files.sort();
    files
}

fn reproducibility(dir: &Path) -> Outcome {
    let cfg = dir.join("repro.json");
    fs::write(
        &cfg,
        r#"{"train": {"steps": 4, "augment": true}, "data": {"n_train": 2, "n_val": 1, "size": 16}}"#,
    )
    .unwrap();
    let twice = |name: &str, args: &[&str]| -> Result<PathBuf, String> {
        let a = dir.join(format!("{name}_a"));
        let b = dir.join(format!("{name}_b"));
        for d in [&a, &b] {
            let mut full = args.to_vec();
            full.extend(["--config", s(&cfg), "--out", s(d)]);
            bin(&full)?;
        }
        let (sa, sb) = (snapshot(&a), snapshot(&b));
        if sa.is_empty() || sa != sb {
            return Err(format!("{name}: outputs differ between runs"));
        }
        Ok(a)
    };
    let gt = twice("phantom", &["phantom", "generate", "--count", "3", "--size", "16", "--seed", "10"])?;
    let pred = dir.join("pred");
    for id in ["phantom_000", "phantom_001", "phantom_002"] {
        let p = dcadose::volume::load_patient(&gt.join(id)).map_err(|e| e.to_string())?;
        let noisy = p.dose.map(|d| (0.93 * d + 1.5).max(0.0));
        dcadose::volume::write_dose(&pred.join(id).join("dose.csv"), &noisy).map_err(|e| e.to_string())?;
    }
    twice("evaluate", &["evaluate", "--pred", s(&pred), "--gt", s(&gt)])?;
    for target in ["dca", "loss", "net"] {
        twice(&format!("gradcheck_{target}"), &["gradcheck", "--target", target])?;
    }
    let pdir = gt.join("phantom_000");
    let pfile = pred.join("phantom_000/dose.csv");
    twice("dvh", &["dvh-plot", "--patient", s(&pdir), "--pred", s(&pfile)])?;
    twice("train", &["train-demo"])?;
    twice("ablation", &["train-demo", "--loss-ablation"])?;
    Ok("phantom, evaluate, gradcheck x3, dvh-plot, train-demo, ablation: byte-identical".into())
}

fn main() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("1 gradient fidelity", Box::new(gradient_fidelity)),
        ("2 attention oracles", Box::new(attention_oracles)),
        ("3 loss identities", Box::new(loss_identities)),
        ("4 DVH relaxation convergence", Box::new(dvh_convergence)),
        ("5 metric oracles", Box::new(metric_oracles)),
        ("6 acceptance threshold", Box::new(threshold_semantics)),
        ("7 identity initialization", Box::new(identity_init)),
        ("8 toy training", Box::new(|| toy_training(dir))),
        ("9 loss ablation", Box::new(|| loss_ablation(dir))),
        ("10 reproducibility", Box::new(|| reproducibility(dir))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|e| Err(format!("panicked: {:?}", e.downcast_ref::<String>().map(String::as_str).or(e.downcast_ref::<&str>().copied()))));
        match outcome {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  criterion {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
