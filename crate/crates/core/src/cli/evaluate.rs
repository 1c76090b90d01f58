use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Context};

use super::{load_cohort, sig6, Run};
use crate::metrics::{EvalCase, MetricReport};
use crate::volume::{dose_path, load_dose, Grid, Patient};

pub(super) fn evaluate(run: &mut Run, pred_dir: &Path, gt_dir: &Path) -> anyhow::Result<()> {
    run.input(pred_dir);
    run.input(gt_dir);
    let gts = load_cohort(gt_dir)?;
    let gt_ids: BTreeSet<&str> = gts.iter().map(|p| p.id.as_str()).collect();
    let mut pred_ids = BTreeSet::new();
    for entry in std::fs::read_dir(pred_dir).with_context(|| format!("cannot read {}", pred_dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            pred_ids.insert(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
    }
    let pred_ids: BTreeSet<&str> = pred_ids.iter().map(String::as_str).collect();
    if pred_ids != gt_ids {
        let missing: Vec<_> = gt_ids.difference(&pred_ids).collect();
        let extra: Vec<_> = pred_ids.difference(&gt_ids).collect();
        bail!("patient id mismatch: missing predictions {missing:?}, unknown predictions {extra:?}");
    }
    let preds = gts
        .iter()
        .map(|p| {
            let path = dose_path(&pred_dir.join(&p.id));
            load_dose(&path, p.shape()).with_context(|| format!("malformed prediction {}", path.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    report(run, &gts, &preds, "", "evaluate")?;
    Ok(())
}

/// Computes the metric report of `preds` against `gts` and writes
/// `report.json` and `rva_by_structure.csv` under `prefix`.
pub(super) fn report(
    run: &mut Run,
    gts: &[Patient],
    preds: &[Grid],
    prefix: &str,
    label: &str,
) -> anyhow::Result<MetricReport> {
    let cases: Vec<EvalCase> = gts.iter().zip(preds).map(|(g, p)| EvalCase::new(g, p)).collect();
    let report = MetricReport::compute(&cases, run.config.eval.threshold_gy)?;
    report.write_json(&run.output(format!("{prefix}report.json")))?;
    report.write_rva_csv(&run.output(format!("{prefix}rva_by_structure.csv")), label)?;
    println!(
        "{label}: {} patients  S_Dose {} Gy  S_DVH {} Gy  R_VA {}%  R_PA {}%",
        report.n_patients,
        sig6(report.dose_score_gy),
        sig6(report.dvh_score_gy),
        sig6(100.0 * report.mean_r_va),
        sig6(100.0 * report.mean_r_pa)
    );
    Ok(report)
}
