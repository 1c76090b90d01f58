//! Loop-level reference implementations. Nothing here touches the tape.

use std::collections::BTreeMap;

use dcadose::params::ParamStore;
use dcadose::volume::{Grid, Mask, Patient, Structure};
use dcadose::tensor::{Tensor, LAYER_NORM_EPS};

/// Block means of a `[C, H, W, D]` volume by explicit six-fold loops.
pub fn avg_pool3d(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let (c, h, w, d) = (s[0], s[1], s[2], s[3]);
    let (ho, wo, dd) = (h / k, w / k, d / k);
    let mut out = Tensor::zeros(&[c, ho, wo, dd]);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                for l in 0..dd {
                    let mut acc = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            for e in 0..k {
                                acc += x.at(&[ch, i * k + a, j * k + b, l * k + e]);
                            }
                        }
                    }
                    let o = out.offset(&[ch, i, j, l]);
                    out.data_mut()[o] = acc / (k * k * k) as f64;
                }
            }
        }
    }
    out
}

type Mat = Vec<Vec<f64>>;

fn rows(t: &Tensor) -> Mat {
    let s = t.shape();
    (0..s[0]).map(|r| t.data()[r * s[1]..(r + 1) * s[1]].to_vec()).collect()
}

fn from_rows(m: &Mat) -> Tensor {
    let cols = m[0].len();
    Tensor::new(vec![m.len(), cols], m.iter().flatten().copied().collect()).unwrap()
}

fn affine(m: &Mat, params: &ParamStore, name: &str) -> Mat {
    let s = params.get(&format!("{name}.scale")).unwrap().data();
    let b = params.get(&format!("{name}.bias")).unwrap().data();
    m.iter()
        .map(|r| r.iter().enumerate().map(|(c, v)| v * s[c] + b[c]).collect())
        .collect()
}

fn layer_norm(m: &Mat, params: &ParamStore, name: &str) -> Mat {
    let g = params.get(&format!("{name}.gamma")).unwrap().data();
    let b = params.get(&format!("{name}.beta")).unwrap().data();
    m.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            r.iter().enumerate().map(|(c, v)| (v - mean) * inv * g[c] + b[c]).collect()
        })
        .collect()
}

fn concat(ms: &[Mat]) -> Mat {
    (0..ms[0].len())
        .map(|p| ms.iter().flat_map(|m| m[p].iter().copied()).collect())
        .collect()
}

fn softmax_row(r: &mut [f64]) {
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in r.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in r.iter_mut() {
        *v /= z;
    }
}

/// Channel cross-attention by explicit sums over tokens and channels.
pub fn channel_cross_attention(tokens: &[Tensor], params: &ParamStore, prefix: &str) -> Vec<Tensor> {
    let ts: Vec<Mat> = tokens.iter().map(rows).collect();
    let p = ts[0].len();
    let tc = concat(&ts);
    let cc = tc[0].len();
    let k = affine(&tc, params, &format!("{prefix}cca.k"));
    let v = affine(&tc, params, &format!("{prefix}cca.v"));
    ts.iter()
        .enumerate()
        .map(|(i, t)| {
            let q = affine(t, params, &format!("{prefix}cca.q.{i}"));
            let ci = t[0].len();
            let mut out = vec![vec![0.0; ci]; p];
            for a in 0..ci {
                let mut s: Vec<f64> = (0..cc)
                    .map(|b| (0..p).map(|r| q[r][a] * k[r][b]).sum::<f64>() / (cc as f64).sqrt())
                    .collect();
                softmax_row(&mut s);
                for r in 0..p {
                    out[r][a] = (0..cc).map(|b| s[b] * v[r][b]).sum::<f64>() + t[r][a];
                }
            }
            from_rows(&out)
        })
        .collect()
}

/// Multi-head spatial cross-attention by explicit sums.
pub fn spatial_cross_attention(tokens: &[Tensor], params: &ParamStore, prefix: &str, heads: usize) -> Vec<Tensor> {
    let ts: Vec<Mat> = tokens.iter().map(rows).collect();
    let p = ts[0].len();
    let normed: Vec<Mat> = ts
        .iter()
        .enumerate()
        .map(|(i, t)| layer_norm(t, params, &format!("{prefix}sca.norm.{i}")))
        .collect();
    let tc = concat(&normed);
    let cc = tc[0].len();
    let dh = cc / heads;
    let q = affine(&tc, params, &format!("{prefix}sca.q"));
    let k = affine(&tc, params, &format!("{prefix}sca.k"));
    let mut attn = vec![vec![vec![0.0; p]; p]; heads];
    for (h, a) in attn.iter_mut().enumerate() {
        for r in 0..p {
            for s in 0..p {
                a[r][s] = (0..dh).map(|c| q[r][h * dh + c] * k[s][h * dh + c]).sum::<f64>() / (dh as f64).sqrt();
            }
            softmax_row(&mut a[r]);
        }
    }
    ts.iter()
        .enumerate()
        .map(|(i, t)| {
            let v = affine(t, params, &format!("{prefix}sca.v.{i}"));
            let ci = t[0].len();
            let w = ci / heads;
            let mut out = vec![vec![0.0; ci]; p];
            for r in 0..p {
                for c in 0..ci {
                    let h = c / w;
                    out[r][c] = (0..p).map(|s| attn[h][r][s] * v[s][c]).sum::<f64>() + t[r][c];
                }
            }
            from_rows(&out)
        })
        .collect()
}

/// Mean `|a − b|` over `mask` by a triple loop over `(i, j, k)`.
pub fn masked_mean_abs(a: &Grid, b: &Grid, mask: &Mask) -> f64 {
    let [h, w, d] = a.shape();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                if mask.get(i, j, k) {
                    num += (a.get(i, j, k) - b.get(i, j, k)).abs();
                    den += 1.0;
                }
            }
        }
    }
    num / den
}

/// Criteria by sorting a copy of the masked doses: OARs give
/// `[D_0.1cc, D_mean]`, PTVs `[D_1, D_95, D_99]`.
pub fn criteria(dose: &Grid, mask: &Mask, s: Structure, voxel_dims_mm: [f64; 3]) -> Vec<f64> {
    let mut v: Vec<f64> = dose.data().iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&d, _)| d).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if s.is_ptv() {
        let pct = |q: f64| v[(q * (n - 1) as f64 + 1e-9).floor() as usize];
        vec![pct(0.99), pct(0.05), pct(0.01)]
    } else {
        let voxel_mm3: f64 = voxel_dims_mm.iter().product();
        let k = ((100.0 / voxel_mm3).floor() as usize).min(n - 1);
        let mut desc = v.clone();
        desc.reverse();
        vec![desc[k], v.iter().sum::<f64>() / n as f64]
    }
}

pub struct CohortOracle {
    pub dose_score: f64,
    pub dvh_score: f64,
    pub r_va: BTreeMap<Structure, f64>,
    pub mean_r_va: f64,
    pub mean_r_pa: f64,
}

/// Every aggregate recomputed from raw grids as flat lists.
pub fn cohort(preds: &[Grid], gts: &[Patient], threshold: f64) -> CohortOracle {
    let n = gts.len() as f64;
    let dose_score = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| masked_mean_abs(p, &g.dose, &g.possible_dose_mask))
        .sum::<f64>()
        / n;
    let mut triples = Vec::new();
    let mut va: BTreeMap<Structure, Vec<f64>> = BTreeMap::new();
    let mut pa = 0.0;
    for (p, g) in preds.iter().zip(gts) {
        let mut per_structure = Vec::new();
        for (&s, m) in &g.structures {
            let a = criteria(p, m, s, g.voxel_dims_mm);
            let b = criteria(&g.dose, m, s, g.voxel_dims_mm);
            triples.extend(a.iter().zip(&b).map(|(x, y)| (x - y).abs()));
            let mad = masked_mean_abs(p, &g.dose, m);
            va.entry(s).or_default().push(if mad < threshold { 1.0 } else { 0.0 });
            per_structure.push(mad);
        }
        if per_structure.iter().sum::<f64>() / (per_structure.len() as f64) < threshold {
            pa += 1.0;
        }
    }
    let r_va: BTreeMap<Structure, f64> = va
        .into_iter()
        .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    CohortOracle {
        dose_score,
        dvh_score: triples.iter().sum::<f64>() / triples.len() as f64,
        mean_r_va: r_va.values().sum::<f64>() / r_va.len() as f64,
        r_va,
        mean_r_pa: pa / n,
    }
}
