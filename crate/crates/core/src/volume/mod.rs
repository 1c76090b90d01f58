//! Patient volumes: the data model, the sparse on-disk format, CT
//! preprocessing, model-input assembly and seeded augmentation.
//!
//! Grids are `[H, W, D]`, row-major, with linear index
//! `idx = i * (W * D) + j * D + k`.

mod augment;
mod io;

pub use augment::{augment, AugmentParams};
pub use io::{dose_path, load_dose, load_patient, write_dose, write_patient};

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub type Shape3 = [usize; 3];

/// Lower and upper HU clip bounds and the normalization divisor.
pub const CT_CLIP_MIN: f64 = -1024.0;
pub const CT_CLIP_MAX: f64 = 1500.0;
pub const CT_SCALE: f64 = 1000.0;

/// Channels of the model input: normalized CT, ten structures, possible-dose mask.
pub const INPUT_CHANNELS: usize = 2 + Structure::ALL.len();

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: missing required file")]
    Missing { path: PathBuf },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {msg}")]
    Csv { path: PathBuf, msg: String },
    #[error("{path}: index {index} out of range for {len} voxels")]
    IndexOutOfRange { path: PathBuf, index: usize, len: usize },
    #[error("{path}: duplicate index {index}")]
    DuplicateIndex { path: PathBuf, index: usize },
    #[error("{path}: non-binary mask value {value}")]
    NonBinary { path: PathBuf, value: String },
    #[error("invalid patient: {0}")]
    Invalid(String),
}

/// The fixed structure vocabulary, in model-input channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Structure {
    Brainstem,
    SpinalCord,
    RightParotid,
    LeftParotid,
    Esophagus,
    Larynx,
    Mandible,
    #[serde(rename = "PTV56")]
    Ptv56,
    #[serde(rename = "PTV63")]
    Ptv63,
    #[serde(rename = "PTV70")]
    Ptv70,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StructureKind {
    Oar,
    Ptv { prescription_gy: f64 },
}

impl Structure {
    pub const ALL: [Structure; 10] = [
        Structure::Brainstem,
        Structure::SpinalCord,
        Structure::RightParotid,
        Structure::LeftParotid,
        Structure::Esophagus,
        Structure::Larynx,
        Structure::Mandible,
        Structure::Ptv56,
        Structure::Ptv63,
        Structure::Ptv70,
    ];

    pub const OARS: [Structure; 7] = [
        Structure::Brainstem,
        Structure::SpinalCord,
        Structure::RightParotid,
        Structure::LeftParotid,
        Structure::Esophagus,
        Structure::Larynx,
        Structure::Mandible,
    ];

    pub const PTVS: [Structure; 3] = [Structure::Ptv56, Structure::Ptv63, Structure::Ptv70];

    pub fn name(self) -> &'static str {
        match self {
            Structure::Brainstem => "Brainstem",
            Structure::SpinalCord => "SpinalCord",
            Structure::RightParotid => "RightParotid",
            Structure::LeftParotid => "LeftParotid",
            Structure::Esophagus => "Esophagus",
            Structure::Larynx => "Larynx",
            Structure::Mandible => "Mandible",
            Structure::Ptv56 => "PTV56",
            Structure::Ptv63 => "PTV63",
            Structure::Ptv70 => "PTV70",
        }
    }

    pub fn kind(self) -> StructureKind {
        match self {
            Structure::Ptv56 => StructureKind::Ptv { prescription_gy: 56.0 },
            Structure::Ptv63 => StructureKind::Ptv { prescription_gy: 63.0 },
            Structure::Ptv70 => StructureKind::Ptv { prescription_gy: 70.0 },
            _ => StructureKind::Oar,
        }
    }

    pub fn is_ptv(self) -> bool {
        matches!(self.kind(), StructureKind::Ptv { .. })
    }

    /// Channel of this structure in [`assemble_input`]'s output.
    pub fn channel(self) -> usize {
        1 + Structure::ALL.iter().position(|&s| s == self).expect("vocabulary member")
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Structure {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Structure::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| VolumeError::Invalid(format!("unknown structure `{s}`")))
    }
}

pub fn linear_index(shape: Shape3, i: usize, j: usize, k: usize) -> usize {
    i * shape[1] * shape[2] + j * shape[2] + k
}

pub fn voxel_coords(shape: Shape3, idx: usize) -> (usize, usize, usize) {
    let plane = shape[1] * shape[2];
    (idx / plane, (idx % plane) / shape[2], idx % shape[2])
}

/// Dense scalar field over a voxel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Shape3,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self, VolumeError> {
        if shape.contains(&0) || data.len() != shape.iter().product::<usize>() {
            return Err(VolumeError::Invalid(format!(
                "grid of shape {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape3, v: f64) -> Self {
        Self {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|idx| {
                let (i, j, k) = voxel_coords(shape, idx);
                f(i, j, k)
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[linear_index(self.shape, i, j, k)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.data.clone()).expect("grid shape is valid")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, VolumeError> {
        let s = t.shape();
        let shape = match *s {
            [h, w, d] | [1, h, w, d] => [h, w, d],
            _ => return Err(VolumeError::Invalid(format!("tensor of shape {s:?} is not a volume"))),
        };
        Grid::new(shape, t.data().to_vec())
    }
}

/// Binary voxel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Shape3,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: Shape3, data: Vec<bool>) -> Result<Self, VolumeError> {
        if shape.contains(&0) || data.len() != shape.iter().product::<usize>() {
            return Err(VolumeError::Invalid(format!(
                "mask of shape {shape:?} cannot hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn empty(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![false; shape.iter().product()],
        }
    }

    pub fn full(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![true; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|idx| {
                let (i, j, k) = voxel_coords(shape, idx);
                f(i, j, k)
            })
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[linear_index(self.shape, i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Linear indices of voxels inside the mask, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Mask as 0/1 floats.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// CT in Hounsfield units, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct HuGrid(pub Grid);

/// CT after clipping to [-1024, 1500] HU and dividing by 1000.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCt(Grid);

impl NormalizedCt {
    pub fn grid(&self) -> &Grid {
        &self.0
    }

    /// Wraps a grid already in normalized units (used by intensity augmentations).
    pub(crate) fn from_normalized(g: Grid) -> Self {
        Self(g)
    }
}

pub fn preprocess_ct(ct: &HuGrid) -> NormalizedCt {
    NormalizedCt(ct.0.map(|v| v.clamp(CT_CLIP_MIN, CT_CLIP_MAX) / CT_SCALE))
}

/// One case: CT, ground-truth dose, possible-dose mask and the structures present.
#[derive(Debug, Clone, PartialEq)]
pub struct Patient {
    pub id: String,
    pub voxel_dims_mm: [f64; 3],
    pub ct: HuGrid,
    pub dose: Grid,
    pub possible_dose_mask: Mask,
    pub structures: BTreeMap<Structure, Mask>,
}

/// A patient whose CT has been preprocessed; the form training consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPatient {
    pub id: String,
    pub voxel_dims_mm: [f64; 3],
    pub ct: NormalizedCt,
    pub dose: Grid,
    pub possible_dose_mask: Mask,
    pub structures: BTreeMap<Structure, Mask>,
}

fn check_common(
    shape: Shape3,
    voxel_dims: [f64; 3],
    dose: &Grid,
    pdm: &Mask,
    structures: &BTreeMap<Structure, Mask>,
) -> Result<(), VolumeError> {
    if dose.shape() != shape || pdm.shape() != shape {
        return Err(VolumeError::Invalid("grids do not share a shape".into()));
    }
    if let Some((s, _)) = structures.iter().find(|(_, m)| m.shape() != shape) {
        return Err(VolumeError::Invalid(format!("structure {s} has a different shape")));
    }
    if voxel_dims.iter().any(|&d| !(d.is_finite() && d > 0.0)) {
        return Err(VolumeError::Invalid(format!("voxel dims {voxel_dims:?} must be positive")));
    }
    if dose.data().iter().any(|&d| !(d.is_finite() && d >= 0.0)) {
        return Err(VolumeError::Invalid("dose values must be finite and non-negative".into()));
    }
    Ok(())
}

impl Patient {
    pub fn shape(&self) -> Shape3 {
        self.ct.0.shape()
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.ct.0.data().iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid("CT values must be finite".into()));
        }
        check_common(
            self.shape(),
            self.voxel_dims_mm,
            &self.dose,
            &self.possible_dose_mask,
            &self.structures,
        )
    }

    pub fn prepare(&self) -> PreparedPatient {
        PreparedPatient {
            id: self.id.clone(),
            voxel_dims_mm: self.voxel_dims_mm,
            ct: preprocess_ct(&self.ct),
            dose: self.dose.clone(),
            possible_dose_mask: self.possible_dose_mask.clone(),
            structures: self.structures.clone(),
        }
    }
}

impl PreparedPatient {
    pub fn shape(&self) -> Shape3 {
        self.ct.grid().shape()
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        check_common(
            self.shape(),
            self.voxel_dims_mm,
            &self.dose,
            &self.possible_dose_mask,
            &self.structures,
        )
    }
}

/// Stacks `[normalized CT, 10 structure masks in vocabulary order, possible-dose mask]`
/// into a `[12, H, W, D]` tensor; absent structures are zero channels.
pub fn assemble_input(p: &PreparedPatient) -> Tensor {
    let shape = p.shape();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(INPUT_CHANNELS * n);
    data.extend_from_slice(p.ct.grid().data());
    for s in Structure::ALL {
        match p.structures.get(&s) {
            Some(m) => data.extend(m.to_f64()),
            None => data.extend(std::iter::repeat_n(0.0, n)),
        }
    }
    data.extend(p.possible_dose_mask.to_f64());
    Tensor::new(vec![INPUT_CHANNELS, shape[0], shape[1], shape[2]], data).expect("channel stack")
}
