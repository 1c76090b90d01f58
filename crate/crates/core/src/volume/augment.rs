//! Seeded training augmentations.
//!
//! One `ChaCha8` stream per call, seeded from the caller's `u64`. Every call
//! consumes exactly 15 uniform `[0, 1)` draws in this order, whether or not a
//! transform fires:
//!
//! | draws | use |
//! |-------|-----|
//! | 3 | flip gate per axis (fires below 0.5) |
//! | 1 + 3 | shear gate (below 0.2), shear coefficients in [-0.1, 0.1] |
//! | 1 + 1 | zoom gate (below 0.5), zoom factor in [0.9, 1.3] |
//! | 1 + 3 | smoothing gate (below 0.2), per-axis sigma in [0.25, 1.5] voxels |
//! | 1 + 1 | contrast gate (below 0.2), gamma in [0.5, 2.0] |
//!
//! Geometric transforms (flip, shear, zoom) resample CT, dose, the
//! possible-dose mask and every structure with nearest-neighbour lookup and
//! zero fill outside the grid. Smoothing and contrast touch only the CT.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Grid, Mask, NormalizedCt, PreparedPatient, Shape3};

/// Output voxel to source voxel, `None` when it falls outside the grid.
type CoordMap = Box<dyn Fn([usize; 3]) -> Option<[usize; 3]>>;

pub const FLIP_PROB: f64 = 0.5;
pub const SHEAR_PROB: f64 = 0.2;
pub const SHEAR_RANGE: f64 = 0.1;
pub const ZOOM_PROB: f64 = 0.5;
pub const ZOOM_RANGE: (f64, f64) = (0.9, 1.3);
pub const SMOOTH_PROB: f64 = 0.2;
pub const SMOOTH_SIGMA_RANGE: (f64, f64) = (0.25, 1.5);
pub const CONTRAST_PROB: f64 = 0.2;
pub const CONTRAST_GAMMA_RANGE: (f64, f64) = (0.5, 2.0);
const CONTRAST_EPS: f64 = 1e-7;
const GAUSS_TRUNCATE: f64 = 4.0;

/// Concrete transform parameters; `None` means the transform does not fire.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentParams {
    pub flip: [bool; 3],
    /// Off-diagonal coefficients `(xy, xz, yx)` of the shear matrix.
    pub shear: Option<[f64; 3]>,
    pub zoom: Option<f64>,
    pub smooth_sigma: Option<[f64; 3]>,
    pub contrast_gamma: Option<f64>,
}

fn lerp(u: f64, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * u
}

impl AugmentParams {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = || rng.random::<f64>();
        let flip = [u() < FLIP_PROB, u() < FLIP_PROB, u() < FLIP_PROB];
        let shear_on = u() < SHEAR_PROB;
        let coeffs = [u(), u(), u()].map(|v| lerp(v, (-SHEAR_RANGE, SHEAR_RANGE)));
        let zoom_on = u() < ZOOM_PROB;
        let zoom = lerp(u(), ZOOM_RANGE);
        let smooth_on = u() < SMOOTH_PROB;
        let sigma = [u(), u(), u()].map(|v| lerp(v, SMOOTH_SIGMA_RANGE));
        let contrast_on = u() < CONTRAST_PROB;
        let gamma = lerp(u(), CONTRAST_GAMMA_RANGE);
        Self {
            flip,
            shear: shear_on.then_some(coeffs),
            zoom: zoom_on.then_some(zoom),
            smooth_sigma: smooth_on.then_some(sigma),
            contrast_gamma: contrast_on.then_some(gamma),
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    /// Applies the transforms in order: flip, shear, zoom, smoothing, contrast.
    pub fn apply(&self, p: &PreparedPatient) -> PreparedPatient {
        let shape = p.shape();
        let mut maps: Vec<CoordMap> = Vec::new();
        if self.flip.iter().any(|&f| f) {
            let flip = self.flip;
            maps.push(Box::new(move |q| {
                Some(std::array::from_fn(|a| if flip[a] { shape[a] - 1 - q[a] } else { q[a] }))
            }));
        }
        if let Some([sxy, sxz, syx]) = self.shear {
            let m = [[1.0, sxy, sxz], [syx, 1.0, 0.0], [0.0, 0.0, 1.0]];
            maps.push(Box::new(move |q| {
                let c = centered(shape, q);
                let src: [f64; 3] = std::array::from_fn(|r| (0..3).map(|k| m[r][k] * c[k]).sum());
                uncenter(shape, src)
            }));
        }
        if let Some(z) = self.zoom {
            maps.push(Box::new(move |q| {
                let c = centered(shape, q);
                uncenter(shape, c.map(|v| v / z))
            }));
        }

        let mut ct = p.ct.grid().clone();
        let mut dose = p.dose.clone();
        let mut pdm = p.possible_dose_mask.clone();
        let mut structures = p.structures.clone();
        for map in &maps {
            ct = resample_grid(&ct, map);
            dose = resample_grid(&dose, map);
            pdm = resample_mask(&pdm, map);
            for m in structures.values_mut() {
                *m = resample_mask(m, map);
            }
        }
        if let Some(sigma) = self.smooth_sigma {
            ct = gaussian_smooth(&ct, sigma);
        }
        if let Some(gamma) = self.contrast_gamma {
            ct = adjust_contrast(&ct, gamma);
        }
        PreparedPatient {
            id: p.id.clone(),
            voxel_dims_mm: p.voxel_dims_mm,
            ct: NormalizedCt::from_normalized(ct),
            dose,
            possible_dose_mask: pdm,
            structures,
        }
    }
}

/// Samples parameters from `seed` and applies them.
pub fn augment(p: &PreparedPatient, seed: u64) -> PreparedPatient {
    AugmentParams::sample(seed).apply(p)
}

fn centered(shape: Shape3, q: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| q[a] as f64 - (shape[a] as f64 - 1.0) / 2.0)
}

fn uncenter(shape: Shape3, c: [f64; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        let v = (c[a] + (shape[a] as f64 - 1.0) / 2.0).round();
        if v < 0.0 || v >= shape[a] as f64 {
            return None;
        }
        out[a] = v as usize;
    }
    Some(out)
}

fn source_index(shape: Shape3, idx: usize, map: &dyn Fn([usize; 3]) -> Option<[usize; 3]>) -> Option<usize> {
    let (i, j, k) = super::voxel_coords(shape, idx);
    map([i, j, k]).map(|[a, b, c]| super::linear_index(shape, a, b, c))
}

fn resample_grid(g: &Grid, map: &dyn Fn([usize; 3]) -> Option<[usize; 3]>) -> Grid {
    let shape = g.shape();
    let data = (0..g.len())
        .map(|idx| source_index(shape, idx, map).map_or(0.0, |s| g.data()[s]))
        .collect();
    Grid::new(shape, data).expect("same shape")
}

fn resample_mask(m: &Mask, map: &dyn Fn([usize; 3]) -> Option<[usize; 3]>) -> Mask {
    let shape = m.shape();
    let data = (0..m.data().len())
        .map(|idx| source_index(shape, idx, map).is_some_and(|s| m.data()[s]))
        .collect();
    Mask::new(shape, data).expect("same shape")
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (GAUSS_TRUNCATE * sigma).ceil() as isize;
    let w: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with edge-replicated borders.
fn gaussian_smooth(g: &Grid, sigma: [f64; 3]) -> Grid {
    let shape = g.shape();
    let mut cur = g.clone();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma[axis]);
        let radius = (kernel.len() / 2) as isize;
        let src = cur.clone();
        for idx in 0..src.len() {
            let (i, j, k) = super::voxel_coords(shape, idx);
            let pos = [i, j, k];
            let mut acc = 0.0;
            for (t, w) in kernel.iter().enumerate() {
                let mut q = pos;
                let off = (pos[axis] as isize + t as isize - radius).clamp(0, shape[axis] as isize - 1);
                q[axis] = off as usize;
                acc += w * src.get(q[0], q[1], q[2]);
            }
            cur.data_mut()[idx] = acc;
        }
    }
    cur
}

/// Gamma adjustment on the min-max normalized intensity range.
fn adjust_contrast(g: &Grid, gamma: f64) -> Grid {
    let min = g.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let max = g.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    g.map(|v| ((v - min) / (range + CONTRAST_EPS)).powf(gamma) * range + min)
}
