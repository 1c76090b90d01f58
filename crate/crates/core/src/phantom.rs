//! Synthetic head-and-neck-like phantoms with analytic dose fields.
//!
//! A body ellipsoid holds spherical PTVs and OARs. Voxel `(i, j, k)` sits at
//! `(i dx, j dy, k dz)` mm and belongs to a region when its centre does. Dose
//! inside the body is `max_ptv presc · exp(−max(0, |p − c| − r) / λ)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{self, Grid, HuGrid, Mask, Patient, Shape3, Structure, StructureKind, VolumeError};

pub const DEFAULT_VOXEL_DIMS_MM: [f64; 3] = [3.5, 3.5, 2.0];
pub const DEFAULT_FALLOFF_MM: f64 = 8.0;
pub const DEFAULT_NOISE_HU: f64 = 20.0;
pub const DEFAULT_SIZE: usize = 32;
pub const DEFAULT_TRAIN_COUNT: usize = 8;
pub const DEFAULT_VAL_COUNT: usize = 2;

pub const HU_AIR: f64 = -1000.0;
pub const HU_TISSUE: f64 = 0.0;
pub const HU_BONE: f64 = 700.0;
/// Normalized body radius beyond which tissue is bone.
pub const SHELL_INNER_RADIUS: f64 = 0.9;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("{0} lies outside the body")]
    OutsideBody(Structure),
    #[error("{0} covers no voxel centre")]
    EmptyStructure(Structure),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, PhantomError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    /// `|(p − c) / a|`; at most 1 inside.
    pub fn normalized_radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center_mm[a]) / self.semi_axes_mm[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Conservative containment: true only if every point of the sphere is inside.
    pub fn contains_sphere(&self, s: &Sphere) -> bool {
        let min_axis = self.semi_axes_mm.iter().cloned().fold(f64::INFINITY, f64::min);
        self.normalized_radius(s.center_mm) + s.radius_mm / min_axis <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub structure: Structure,
    pub center_mm: [f64; 3],
    pub radius_mm: f64,
}

impl Sphere {
    pub fn distance_to_center(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| (p[a] - self.center_mm[a]).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub id: String,
    pub shape: Shape3,
    pub voxel_dims_mm: [f64; 3],
    pub body: Ellipsoid,
    pub ptv_spheres: Vec<Sphere>,
    pub oar_spheres: Vec<Sphere>,
    pub falloff_mm: f64,
    pub noise_hu: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(PhantomError::Spec(format!("shape {:?} has a zero extent", self.shape)));
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.voxel_dims_mm.iter().all(|&d| positive(d)) || !self.body.semi_axes_mm.iter().all(|&d| positive(d)) {
            return Err(PhantomError::Spec("voxel dims and body axes must be positive".into()));
        }
        if !positive(self.falloff_mm) || !(self.noise_hu.is_finite() && self.noise_hu >= 0.0) {
            return Err(PhantomError::Spec("falloff must be positive and noise non-negative".into()));
        }
        for (spheres, want_ptv) in [(&self.ptv_spheres, true), (&self.oar_spheres, false)] {
            for s in spheres {
                if s.structure.is_ptv() != want_ptv {
                    return Err(PhantomError::Spec(format!("{} listed with the wrong kind", s.structure)));
                }
                if !positive(s.radius_mm) {
                    return Err(PhantomError::Spec(format!("{} radius must be positive", s.structure)));
                }
                if !self.body.contains_sphere(s) {
                    return Err(PhantomError::OutsideBody(s.structure));
                }
            }
        }
        Ok(())
    }

    pub fn position_mm(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            i as f64 * self.voxel_dims_mm[0],
            j as f64 * self.voxel_dims_mm[1],
            k as f64 * self.voxel_dims_mm[2],
        ]
    }

    /// Analytic dose at a point, ignoring the body clip.
    pub fn dose_at(&self, p: [f64; 3]) -> f64 {
        self.ptv_spheres
            .iter()
            .map(|s| {
                let presc = match s.structure.kind() {
                    StructureKind::Ptv { prescription_gy } => prescription_gy,
                    StructureKind::Oar => 0.0,
                };
                presc * (-(s.distance_to_center(p) - s.radius_mm).max(0.0) / self.falloff_mm).exp()
            })
            .fold(0.0, f64::max)
    }
}

/// Rasterizes a spec into a patient.
pub fn generate(spec: &PhantomSpec) -> Result<Patient> {
    spec.validate()?;
    let shape = spec.shape;
    let body = Mask::from_fn(shape, |i, j, k| spec.body.normalized_radius(spec.position_mm(i, j, k)) <= 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_hu).map_err(|e| PhantomError::Spec(e.to_string()))?;
    let ct = Grid::from_fn(shape, |i, j, k| {
        let r = spec.body.normalized_radius(spec.position_mm(i, j, k));
        let base = if r > 1.0 {
            HU_AIR
        } else if r >= SHELL_INNER_RADIUS {
            HU_BONE
        } else {
            HU_TISSUE
        };
        base + noise.sample(&mut rng)
    });
    let dose = Grid::from_fn(shape, |i, j, k| {
        if body.get(i, j, k) {
            spec.dose_at(spec.position_mm(i, j, k))
        } else {
            0.0
        }
    });
    let mut structures = std::collections::BTreeMap::new();
    for s in spec.ptv_spheres.iter().chain(&spec.oar_spheres) {
        let m = Mask::from_fn(shape, |i, j, k| s.distance_to_center(spec.position_mm(i, j, k)) <= s.radius_mm);
        let entry = structures.entry(s.structure).or_insert_with(|| Mask::empty(shape));
        for (dst, src) in entry.data_mut().iter_mut().zip(m.data()) {
            *dst |= *src;
        }
    }
    if let Some((&s, _)) = structures.iter().find(|(_, m)| m.count() == 0) {
        return Err(PhantomError::EmptyStructure(s));
    }
    let p = Patient {
        id: spec.id.clone(),
        voxel_dims_mm: spec.voxel_dims_mm,
        ct: HuGrid(ct),
        dose,
        possible_dose_mask: body,
        structures,
    };
    p.validate()?;
    Ok(p)
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, from: &[T], n: usize) -> Vec<T> {
    let mut idx = rand::seq::index::sample(rng, from.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| from[i]).collect()
}

fn place_sphere(rng: &mut ChaCha8Rng, body: &Ellipsoid, structure: Structure, radius_mm: f64) -> Sphere {
    let min_axis = body.semi_axes_mm.iter().cloned().fold(f64::INFINITY, f64::min);
    let reach = 0.9 * (1.0 - radius_mm / min_axis).max(0.0);
    // Rejection-sample a point in the unit ball.
    let u = loop {
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        if u.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
            break u;
        }
    };
    Sphere {
        structure,
        center_mm: std::array::from_fn(|a| body.center_mm[a] + body.semi_axes_mm[a] * reach * u[a]),
        radius_mm,
    }
}

/// A random valid spec: 1 to 3 PTVs and 2 to 5 OARs, each a distinct structure.
pub fn random_spec(id: impl Into<String>, shape: Shape3, voxel_dims_mm: [f64; 3], seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent: [f64; 3] = std::array::from_fn(|a| shape[a] as f64 * voxel_dims_mm[a]);
    let body = Ellipsoid {
        center_mm: std::array::from_fn(|a| (shape[a] as f64 - 1.0) * voxel_dims_mm[a] / 2.0),
        semi_axes_mm: std::array::from_fn(|a| extent[a] * rng.random_range(0.42..0.48)),
    };
    let min_axis = body.semi_axes_mm.iter().cloned().fold(f64::INFINITY, f64::min);
    // Large enough that the sphere always holds at least one voxel centre.
    let min_radius = 0.5 * voxel_dims_mm.iter().map(|d| d * d).sum::<f64>().sqrt() * 1.01;
    let n_ptv = rng.random_range(1..=3);
    let n_oar = rng.random_range(2..=5);
    let ptvs = pick(&mut rng, &Structure::PTVS, n_ptv);
    let oars = pick(&mut rng, &Structure::OARS, n_oar);
    let ptv_spheres = ptvs
        .into_iter()
        .map(|s| {
            let r = (min_axis * rng.random_range(0.2..0.35)).max(min_radius);
            place_sphere(&mut rng, &body, s, r)
        })
        .collect();
    let oar_spheres = oars
        .into_iter()
        .map(|s| {
            let r = (min_axis * rng.random_range(0.12..0.25)).max(min_radius);
            place_sphere(&mut rng, &body, s, r)
        })
        .collect();
    PhantomSpec {
        id: id.into(),
        shape,
        voxel_dims_mm,
        body,
        ptv_spheres,
        oar_spheres,
        falloff_mm: DEFAULT_FALLOFF_MM,
        noise_hu: DEFAULT_NOISE_HU,
        seed: rng.random(),
    }
}

pub fn phantom_id(index: usize) -> String {
    format!("phantom_{index:03}")
}

/// `count` random phantoms of extent `size³`, generated in parallel from
/// per-phantom seeds drawn up front so the result does not depend on scheduling.
pub fn generate_cohort(count: usize, size: usize, voxel_dims_mm: [f64; 3], seed: u64) -> Result<Vec<Patient>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..count).map(|_| rng.random()).collect();
    seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| generate(&random_spec(phantom_id(i), [size; 3], voxel_dims_mm, s)))
        .collect()
}

/// Writes each patient to `dir/<id>/`.
pub fn write_cohort(patients: &[Patient], dir: &Path) -> Result<()> {
    for p in patients {
        volume::write_patient(p, &dir.join(&p.id))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn containment_is_conservative() {
        let body = Ellipsoid {
            center_mm: [0.0; 3],
            semi_axes_mm: [10.0, 20.0, 30.0],
        };
        let s = |c: [f64; 3], r| Sphere {
            structure: Structure::Ptv70,
            center_mm: c,
            radius_mm: r,
        };
        assert!(body.contains_sphere(&s([0.0; 3], 10.0)));
        assert!(!body.contains_sphere(&s([1.0, 0.0, 0.0], 10.0)));
        assert!(body.contains_sphere(&s([0.0, 10.0, 0.0], 5.0)));
    }

    #[test]
    fn random_specs_validate() {
        for seed in 0..50 {
            let spec = random_spec("p", [16, 16, 16], DEFAULT_VOXEL_DIMS_MM, seed);
            spec.validate().unwrap();
            generate(&spec).unwrap();
        }
    }
}
