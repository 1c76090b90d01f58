//! Evaluation metrics: dose error and score, DVH criteria and score, and the
//! volume-wise (VA) and patient-wise (PA) clinical acceptance rates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Grid, Mask, Patient, Structure, StructureKind};

pub const DEFAULT_THRESHOLD_GY: f64 = 3.0;
/// Volume (cm³) behind the `D_0.1cc` criterion.
pub const NEAR_MAX_VOLUME_CM3: f64 = 0.1;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0}: mask is empty")]
    EmptyMask(String),
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("no structures present{0}")]
    NoStructures(String),
    #[error("structure {0} is absent")]
    AbsentStructure(Structure),
    #[error("{0}: grid shapes differ")]
    Shape(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// One prediction paired with its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EvalCase<'a> {
    pub id: &'a str,
    pub pred: &'a Grid,
    pub gt: &'a Grid,
    pub possible_dose_mask: &'a Mask,
    pub structures: &'a BTreeMap<Structure, Mask>,
    pub voxel_dims_mm: [f64; 3],
}

impl<'a> EvalCase<'a> {
    pub fn new(gt: &'a Patient, pred: &'a Grid) -> Self {
        Self {
            id: &gt.id,
            pred,
            gt: &gt.dose,
            possible_dose_mask: &gt.possible_dose_mask,
            structures: &gt.structures,
            voxel_dims_mm: gt.voxel_dims_mm,
        }
    }
}

fn masked_values(dose: &Grid, mask: &Mask, what: &str) -> Result<Vec<f64>> {
    if dose.shape() != mask.shape() {
        return Err(MetricError::Shape(what.into()));
    }
    let v: Vec<f64> = mask.indices().map(|i| dose.data()[i]).collect();
    if v.is_empty() {
        return Err(MetricError::EmptyMask(what.into()));
    }
    Ok(v)
}

/// Mean of `|pred − gt|` over the mask.
pub fn mean_abs_diff(pred: &Grid, gt: &Grid, mask: &Mask, what: &str) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::Shape(what.into()));
    }
    let p = masked_values(pred, mask, what)?;
    let g = masked_values(gt, mask, what)?;
    Ok(p.iter().zip(&g).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// `Σ |pred − gt| M_d / Σ M_d`.
pub fn dose_error(pred: &Grid, gt: &Grid, possible_dose_mask: &Mask) -> Result<f64> {
    mean_abs_diff(pred, gt, possible_dose_mask, "dose_error")
}

/// Unweighted mean of per-patient dose errors.
pub fn dose_score(cases: &[EvalCase]) -> Result<f64> {
    if cases.is_empty() {
        return Err(MetricError::EmptyCohort);
    }
    let errs = cases
        .iter()
        .map(|c| dose_error(c.pred, c.gt, c.possible_dose_mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(rename = "D_0.1cc")]
    D0_1cc,
    #[serde(rename = "D_mean")]
    DMean,
    #[serde(rename = "D_1")]
    D1,
    #[serde(rename = "D_95")]
    D95,
    #[serde(rename = "D_99")]
    D99,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::D0_1cc => "D_0.1cc",
            Criterion::DMean => "D_mean",
            Criterion::D1 => "D_1",
            Criterion::D95 => "D_95",
            Criterion::D99 => "D_99",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DvhCriteria {
    Oar { d_0_1cc: f64, d_mean: f64 },
    Ptv { d_1: f64, d_95: f64, d_99: f64 },
}

impl DvhCriteria {
    pub fn entries(&self) -> Vec<(Criterion, f64)> {
        match *self {
            DvhCriteria::Oar { d_0_1cc, d_mean } => vec![(Criterion::D0_1cc, d_0_1cc), (Criterion::DMean, d_mean)],
            DvhCriteria::Ptv { d_1, d_95, d_99 } => {
                vec![(Criterion::D1, d_1), (Criterion::D95, d_95), (Criterion::D99, d_99)]
            }
        }
    }
}

/// Descending-order index of `D_0.1cc` for the given voxel size,
/// `floor(0.1 cm³ / voxel volume)`, before clamping to the mask size.
pub fn near_max_index(voxel_dims_mm: [f64; 3]) -> usize {
    let voxel_cm3 = voxel_dims_mm.iter().product::<f64>() / 1000.0;
    (NEAR_MAX_VOLUME_CM3 / voxel_cm3).floor() as usize
}

/// Order-statistic criteria on the doses inside `mask`. The `q`-th percentile
/// is the ascending-sorted value at `floor(q (N − 1) / 100)`, in integer arithmetic.
pub fn dvh_criteria(dose: &Grid, mask: &Mask, kind: StructureKind, voxel_dims_mm: [f64; 3]) -> Result<DvhCriteria> {
    let mut v = masked_values(dose, mask, "dvh_criteria")?;
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let at = |q: usize| v[q * (n - 1) / 100];
    Ok(match kind {
        StructureKind::Oar => {
            let k = near_max_index(voxel_dims_mm).min(n - 1);
            DvhCriteria::Oar {
                d_0_1cc: v[n - 1 - k],
                d_mean: v.iter().sum::<f64>() / n as f64,
            }
        }
        StructureKind::Ptv { .. } => DvhCriteria::Ptv {
            d_1: at(99),
            d_95: at(5),
            d_99: at(1),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub criterion: Criterion,
    pub pred_gy: f64,
    pub gt_gy: f64,
    pub abs_diff_gy: f64,
}

fn criteria_diffs(case: &EvalCase, s: Structure, mask: &Mask) -> Result<Vec<CriterionResult>> {
    let p = dvh_criteria(case.pred, mask, s.kind(), case.voxel_dims_mm)?;
    let g = dvh_criteria(case.gt, mask, s.kind(), case.voxel_dims_mm)?;
    Ok(p.entries()
        .into_iter()
        .zip(g.entries())
        .map(|((criterion, pred_gy), (_, gt_gy))| CriterionResult {
            criterion,
            pred_gy,
            gt_gy,
            abs_diff_gy: (pred_gy - gt_gy).abs(),
        })
        .collect())
}

/// Mean of `|criterion(pred) − criterion(gt)|` over every
/// (patient, present structure, criterion) triple.
pub fn dvh_score(cases: &[EvalCase]) -> Result<f64> {
    let mut diffs = Vec::new();
    for c in cases {
        for (&s, m) in c.structures {
            diffs.extend(criteria_diffs(c, s, m)?.into_iter().map(|r| r.abs_diff_gy));
        }
    }
    if diffs.is_empty() {
        return Err(MetricError::NoStructures(String::new()));
    }
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Whether the mean `|pred − gt|` over structure `s` is below `threshold`.
pub fn volume_acceptance(case: &EvalCase, s: Structure, threshold: f64) -> Result<bool> {
    let m = case.structures.get(&s).ok_or(MetricError::AbsentStructure(s))?;
    Ok(mean_abs_diff(case.pred, case.gt, m, s.name())? < threshold)
}

/// Whether the unweighted mean of per-structure mean `|pred − gt|` is below `threshold`.
pub fn patient_acceptance(case: &EvalCase, threshold: f64) -> Result<bool> {
    Ok(patient_mean_structure_error(case)? < threshold)
}

fn patient_mean_structure_error(case: &EvalCase) -> Result<f64> {
    if case.structures.is_empty() {
        return Err(MetricError::NoStructures(format!(" for patient {}", case.id)));
    }
    let errs = case
        .structures
        .iter()
        .map(|(s, m)| mean_abs_diff(case.pred, case.gt, m, s.name()))
        .collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureRate {
    pub structure: Structure,
    /// Patients possessing the structure; the denominator of the rate.
    pub n_patients: usize,
    pub n_accepted: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRates {
    pub r_va: Vec<StructureRate>,
    pub mean_r_va: f64,
    pub mean_r_pa: f64,
}

/// Per-structure VA rates over the patients possessing each structure, their
/// mean over structures present anywhere, and the mean PA over patients.
pub fn acceptance_rates(cases: &[EvalCase], threshold: f64) -> Result<AcceptanceRates> {
    if cases.is_empty() {
        return Err(MetricError::EmptyCohort);
    }
    let mut counts: BTreeMap<Structure, (usize, usize)> = BTreeMap::new();
    let mut pa = 0usize;
    for c in cases {
        for &s in c.structures.keys() {
            let e = counts.entry(s).or_default();
            e.0 += 1;
            e.1 += volume_acceptance(c, s, threshold)? as usize;
        }
        pa += patient_acceptance(c, threshold)? as usize;
    }
    let r_va: Vec<StructureRate> = counts
        .into_iter()
        .map(|(structure, (n_patients, n_accepted))| StructureRate {
            structure,
            n_patients,
            n_accepted,
            rate: n_accepted as f64 / n_patients as f64,
        })
        .collect();
    let mean_r_va = r_va.iter().map(|r| r.rate).sum::<f64>() / r_va.len() as f64;
    Ok(AcceptanceRates {
        r_va,
        mean_r_va,
        mean_r_pa: pa as f64 / cases.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub structure: Structure,
    pub mean_abs_diff_gy: f64,
    pub volume_accepted: bool,
    pub criteria: Vec<CriterionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub id: String,
    pub dose_error_gy: f64,
    pub mean_structure_error_gy: f64,
    pub patient_accepted: bool,
    pub structures: Vec<StructureMetrics>,
}

/// Full evaluation of a cohort. Field order is the serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub threshold_gy: f64,
    pub n_patients: usize,
    pub dose_score_gy: f64,
    pub dvh_score_gy: f64,
    pub mean_r_va: f64,
    pub mean_r_pa: f64,
    /// Denominator used for each per-structure rate.
    pub r_va_denominator: String,
    pub r_va: Vec<StructureRate>,
    pub patients: Vec<PatientMetrics>,
}

fn patient_metrics(c: &EvalCase, threshold: f64) -> Result<PatientMetrics> {
    let structures = c
        .structures
        .iter()
        .map(|(&s, m)| {
            let mad = mean_abs_diff(c.pred, c.gt, m, s.name())?;
            Ok(StructureMetrics {
                structure: s,
                mean_abs_diff_gy: mad,
                volume_accepted: mad < threshold,
                criteria: criteria_diffs(c, s, m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_structure_error_gy = patient_mean_structure_error(c)?;
    Ok(PatientMetrics {
        id: c.id.to_string(),
        dose_error_gy: dose_error(c.pred, c.gt, c.possible_dose_mask)?,
        mean_structure_error_gy,
        patient_accepted: mean_structure_error_gy < threshold,
        structures,
    })
}

impl MetricReport {
    /// Evaluates every case; per-patient work runs on the current rayon pool
    /// and is collected in input order.
    pub fn compute(cases: &[EvalCase], threshold: f64) -> Result<Self> {
        if cases.is_empty() {
            return Err(MetricError::EmptyCohort);
        }
        let patients = cases
            .par_iter()
            .map(|c| patient_metrics(c, threshold))
            .collect::<Result<Vec<_>>>()?;
        let rates = acceptance_rates(cases, threshold)?;
        Ok(Self {
            threshold_gy: threshold,
            n_patients: cases.len(),
            dose_score_gy: dose_score(cases)?,
            dvh_score_gy: dvh_score(cases)?,
            mean_r_va: rates.mean_r_va,
            mean_r_pa: rates.mean_r_pa,
            r_va_denominator: "patients possessing the structure".into(),
            r_va: rates.r_va,
            patients,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|source| MetricError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Per-structure R_VA table, one row per structure plus an `Average` row.
    pub fn write_rva_csv(&self, path: &Path, run: &str) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            structure: &'a str,
            run: &'a str,
            n_patients: Option<usize>,
            n_accepted: Option<usize>,
            r_va_percent: f64,
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.r_va {
            w.serialize(Row {
                structure: r.structure.name(),
                run,
                n_patients: Some(r.n_patients),
                n_accepted: Some(r.n_accepted),
                r_va_percent: 100.0 * r.rate,
            })?;
        }
        w.serialize(Row {
            structure: "Average",
            run,
            n_patients: None,
            n_accepted: None,
            r_va_percent: 100.0 * self.mean_r_va,
        })?;
        w.flush().map_err(|source| MetricError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn near_max_index_for_reference_voxels() {
        assert_eq!(near_max_index([3.5, 3.5, 2.0]), 4);
        assert_eq!(near_max_index([10.0, 10.0, 10.0]), 0);
    }

    #[test]
    fn constant_region_criteria() {
        let d = Grid::filled([3, 3, 3], 60.0);
        let m = Mask::full([3, 3, 3]);
        for kind in [StructureKind::Oar, StructureKind::Ptv { prescription_gy: 70.0 }] {
            let c = dvh_criteria(&d, &m, kind, [3.5, 3.5, 2.0]).unwrap();
            assert!(c.entries().iter().all(|(_, v)| *v == 60.0));
        }
    }

    #[test]
    fn small_mask_clamps_near_max_index() {
        let d = Grid::from_fn([1, 1, 3], |_, _, k| k as f64);
        let c = dvh_criteria(&d, &Mask::full([1, 1, 3]), StructureKind::Oar, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(c, DvhCriteria::Oar { d_0_1cc: 0.0, d_mean: 1.0 });
    }

    #[test]
    fn empty_inputs_are_errors() {
        let g = Grid::zeros([2, 2, 2]);
        assert!(matches!(dose_error(&g, &g, &Mask::empty([2, 2, 2])), Err(MetricError::EmptyMask(_))));
        assert!(matches!(dose_score(&[]), Err(MetricError::EmptyCohort)));
        assert!(matches!(acceptance_rates(&[], 3.0), Err(MetricError::EmptyCohort)));
    }
}
