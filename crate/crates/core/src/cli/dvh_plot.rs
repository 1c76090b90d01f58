use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context};

use super::{sig6, Run};
use crate::losses::exact_dvh;
use crate::volume::{load_dose, load_patient, Grid, Patient};

/// Dose axis spacing of the exported curves.
pub const DVH_STEP_GY: f64 = 0.5;

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Cumulative DVH samples: for each dose on a 0.5 Gy grid, the fraction of
/// each structure receiving at least that dose, ground truth and prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct DvhTable {
    pub dose_gy: Vec<f64>,
    /// `(structure name, gt curve, pred curve)` in structure order.
    pub curves: Vec<(String, Vec<f64>, Vec<f64>)>,
}

pub fn dvh_table(patient: &Patient, pred: &Grid) -> anyhow::Result<DvhTable> {
    if patient.structures.is_empty() {
        bail!("patient {} has no structures", patient.id);
    }
    let max = patient
        .dose
        .data()
        .iter()
        .chain(pred.data())
        .fold(0.0_f64, |a, &b| a.max(b));
    let n = (max / DVH_STEP_GY).ceil() as usize + 2;
    let dose_gy: Vec<f64> = (0..n).map(|i| i as f64 * DVH_STEP_GY).collect();
    let curves = patient
        .structures
        .iter()
        .map(|(s, m)| {
            Ok((
                s.name().to_string(),
                exact_dvh(patient.dose.data(), m, &dose_gy)?,
                exact_dvh(pred.data(), m, &dose_gy)?,
            ))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(DvhTable { dose_gy, curves })
}

impl DvhTable {
    pub fn write_csv(&self, path: &Path) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["dose_gy".to_string()];
        for (name, _, _) in &self.curves {
            header.push(format!("{name}_gt"));
            header.push(format!("{name}_pred"));
        }
        w.write_record(&header)?;
        for (i, d) in self.dose_gy.iter().enumerate() {
            let mut row = vec![d.to_string()];
            for (_, gt, pred) in &self.curves {
                row.push(gt[i].to_string());
                row.push(pred[i].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Line chart: solid ground truth, dashed prediction, one colour per structure.
    pub fn to_svg(&self, title: &str) -> String {
        let (w, h) = (760.0, 480.0);
        let (x0, x1, y0, y1) = (70.0, 580.0, 40.0, 420.0);
        let dmax = self.dose_gy.last().copied().unwrap_or(1.0).max(DVH_STEP_GY);
        let px = |d: f64| x0 + (x1 - x0) * d / dmax;
        let py = |v: f64| y1 - (y1 - y0) * v;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, (x0 + x1) / 2.0, xml_escape(title));
        for t in 0..=5 {
            let v = t as f64 / 5.0;
            let y = py(v);
            let _ = writeln!(s, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, t * 20);
        }
        let xstep = nice_step(dmax);
        let mut d = 0.0;
        while d <= dmax + 1e-9 {
            let x = px(d);
            let _ = writeln!(s, r##"<line x1="{x}" y1="{y1}" x2="{x}" y2="{}" stroke="#333"/>"##, y1 + 5.0);
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, y1 + 18.0, sig6(d));
            d += xstep;
        }
        let _ = writeln!(
            s,
            r##"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="#333"/>"##,
            x1 - x0,
            y1 - y0
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">Dose (Gy)</text>"#, (x0 + x1) / 2.0, h - 20.0);
        let _ = writeln!(
            s,
            r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">Volume (%)</text>"#,
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0
        );
        for (k, (name, gt, pred)) in self.curves.iter().enumerate() {
            let colour = PALETTE[k % PALETTE.len()];
            for (curve, dash) in [(gt, ""), (pred, r#" stroke-dasharray="6 4""#)] {
                let pts: Vec<String> = self
                    .dose_gy
                    .iter()
                    .zip(curve)
                    .map(|(&d, &v)| format!("{:.2},{:.2}", px(d), py(v)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5"{dash} points="{}"/>"#,
                    pts.join(" ")
                );
            }
            let ly = y0 + 10.0 + 18.0 * k as f64;
            let _ = writeln!(s, r#"<line x1="595" y1="{ly}" x2="625" y2="{ly}" stroke="{colour}" stroke-width="1.5"/>"#);
            let _ = writeln!(s, r#"<text x="632" y="{}">{}</text>"#, ly + 4.0, xml_escape(name));
        }
        let ly = y0 + 10.0 + 18.0 * self.curves.len() as f64 + 10.0;
        let _ = writeln!(s, r##"<line x1="595" y1="{ly}" x2="625" y2="{ly}" stroke="#333"/>"##);
        let _ = writeln!(s, r#"<text x="632" y="{}">ground truth</text>"#, ly + 4.0);
        let ly = ly + 18.0;
        let _ = writeln!(s, r##"<line x1="595" y1="{ly}" x2="625" y2="{ly}" stroke="#333" stroke-dasharray="6 4"/>"##);
        let _ = writeln!(s, r#"<text x="632" y="{}">predicted</text>"#, ly + 4.0);
        s.push_str("</svg>\n");
        s
    }
}

fn nice_step(range: f64) -> f64 {
    let raw = range / 8.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(10.0 * mag)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub(super) fn dvh_plot(run: &mut Run, patient_dir: &Path, pred_file: &Path) -> anyhow::Result<()> {
    run.input(patient_dir);
    run.input(pred_file);
    let patient = load_patient(patient_dir).with_context(|| format!("malformed patient {}", patient_dir.display()))?;
    let pred = load_dose(pred_file, patient.shape()).with_context(|| format!("malformed prediction {}", pred_file.display()))?;
    let table = dvh_table(&patient, &pred)?;
    table.write_csv(&run.output("dvh.csv"))?;
    let svg_path = run.output("dvh.svg");
    fs::write(&svg_path, table.to_svg(&format!("DVH {}", patient.id)))
        .with_context(|| format!("cannot write {}", svg_path.display()))?;
    println!(
        "{}: {} structures, {} dose samples up to {} Gy",
        patient.id,
        table.curves.len(),
        table.dose_gy.len(),
        sig6(*table.dose_gy.last().unwrap_or(&0.0))
    );
    Ok(())
}
