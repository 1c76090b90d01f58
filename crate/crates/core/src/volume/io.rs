//! Sparse patient directory format.
//!
//! ```text
//! <dir>/meta.json               {"id": .., "shape": [H, W, D], "voxel_dims_mm": [dx, dy, dz]}
//! <dir>/ct.csv, dose.csv        header `index,value`; one row per voxel whose value is not +0.0
//! <dir>/possible_dose_mask.csv  header `index`; one row per voxel equal to 1
//! <dir>/<Structure>.csv         same as the possible-dose mask, only for structures present
//! ```
//!
//! Values are written in Rust's shortest round-trip decimal form, so a
//! write/load cycle reproduces every grid bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Grid, HuGrid, Mask, Patient, Shape3, Structure, VolumeError};

const META: &str = "meta.json";
const CT: &str = "ct.csv";
const DOSE: &str = "dose.csv";
const POSSIBLE_DOSE_MASK: &str = "possible_dose_mask.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    id: String,
    shape: [usize; 3],
    voxel_dims_mm: [f64; 3],
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> VolumeError {
    VolumeError::Csv {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<fs::File>, VolumeError> {
    if !path.exists() {
        return Err(VolumeError::Missing { path: path.to_path_buf() });
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<fs::File>, allowed: &[&[&str]]) -> Result<usize, VolumeError> {
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    allowed
        .iter()
        .find(|a| **a == cols.as_slice())
        .map(|a| a.len())
        .ok_or_else(|| csv_err(path, format!("unexpected header {cols:?}")))
}

fn parse_index(path: &Path, field: Option<&str>, len: usize, seen: &mut [bool]) -> Result<usize, VolumeError> {
    let raw = field.ok_or_else(|| csv_err(path, "missing index column"))?;
    let index: usize = raw.parse().map_err(|_| csv_err(path, format!("bad index `{raw}`")))?;
    if index >= len {
        return Err(VolumeError::IndexOutOfRange {
            path: path.to_path_buf(),
            index,
            len,
        });
    }
    if std::mem::replace(&mut seen[index], true) {
        return Err(VolumeError::DuplicateIndex {
            path: path.to_path_buf(),
            index,
        });
    }
    Ok(index)
}

fn read_values(path: &Path, shape: Shape3) -> Result<Grid, VolumeError> {
    let len = shape.iter().product();
    let mut rdr = open_csv(path)?;
    check_header(path, &mut rdr, &[&["index", "value"]])?;
    let mut data = vec![0.0; len];
    let mut seen = vec![false; len];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != 2 {
            return Err(csv_err(path, format!("expected 2 fields, found {}", rec.len())));
        }
        let index = parse_index(path, rec.get(0), len, &mut seen)?;
        let raw = &rec[1];
        data[index] = raw
            .parse::<f64>()
            .map_err(|_| csv_err(path, format!("bad value `{raw}`")))?;
    }
    Grid::new(shape, data)
}

/// Reads a mask listing. An optional `value` column is accepted for files
/// produced by other tools; its entries must be 0 or 1.
fn read_mask(path: &Path, shape: Shape3) -> Result<Mask, VolumeError> {
    let len = shape.iter().product();
    let mut rdr = open_csv(path)?;
    let cols = check_header(path, &mut rdr, &[&["index"], &["index", "value"]])?;
    let mut data = vec![false; len];
    let mut seen = vec![false; len];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != cols {
            return Err(csv_err(path, format!("expected {cols} fields, found {}", rec.len())));
        }
        let index = parse_index(path, rec.get(0), len, &mut seen)?;
        let on = match rec.get(1) {
            None => true,
            Some(v) => match v.parse::<f64>() {
                Ok(1.0) => true,
                Ok(0.0) => false,
                _ => {
                    return Err(VolumeError::NonBinary {
                        path: path.to_path_buf(),
                        value: v.to_string(),
                    })
                }
            },
        };
        data[index] = on;
    }
    Mask::new(shape, data)
}

fn write_values(path: &Path, grid: &Grid) -> Result<(), VolumeError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["index", "value"]).map_err(|e| csv_err(path, e))?;
    for (i, v) in grid.data().iter().enumerate() {
        // -0.0 is kept so the round trip stays bit-exact
        if v.to_bits() != 0 {
            w.write_record([i.to_string(), v.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn write_mask(path: &Path, mask: &Mask) -> Result<(), VolumeError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["index"]).map_err(|e| csv_err(path, e))?;
    for i in mask.indices() {
        w.write_record([i.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_meta(dir: &Path) -> Result<Meta, VolumeError> {
    let path = dir.join(META);
    if !path.exists() {
        return Err(VolumeError::Missing { path });
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|source| VolumeError::Json {
        path: path.clone(),
        source,
    })?;
    if meta.shape.contains(&0) {
        return Err(VolumeError::Invalid(format!("{}: zero extent in shape", path.display())));
    }
    Ok(meta)
}

pub fn load_patient(dir: &Path) -> Result<Patient, VolumeError> {
    let meta = read_meta(dir)?;
    let shape = meta.shape;
    let ct = read_values(&dir.join(CT), shape)?;
    let dose = read_values(&dir.join(DOSE), shape)?;
    let possible_dose_mask = read_mask(&dir.join(POSSIBLE_DOSE_MASK), shape)?;
    let mut structures = BTreeMap::new();
    for s in Structure::ALL {
        let path = dir.join(format!("{}.csv", s.name()));
        if path.exists() {
            structures.insert(s, read_mask(&path, shape)?);
        }
    }
    let p = Patient {
        id: meta.id,
        voxel_dims_mm: meta.voxel_dims_mm,
        ct: HuGrid(ct),
        dose,
        possible_dose_mask,
        structures,
    };
    p.validate()?;
    Ok(p)
}

pub fn write_patient(p: &Patient, dir: &Path) -> Result<(), VolumeError> {
    p.validate()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = Meta {
        id: p.id.clone(),
        shape: p.shape(),
        voxel_dims_mm: p.voxel_dims_mm,
    };
    let meta_path = dir.join(META);
    let text = serde_json::to_string_pretty(&meta).map_err(|source| VolumeError::Json {
        path: meta_path.clone(),
        source,
    })?;
    fs::write(&meta_path, text + "\n").map_err(io_err(&meta_path))?;
    write_values(&dir.join(CT), &p.ct.0)?;
    write_values(&dir.join(DOSE), &p.dose)?;
    write_mask(&dir.join(POSSIBLE_DOSE_MASK), &p.possible_dose_mask)?;
    for s in Structure::ALL {
        let path = dir.join(format!("{}.csv", s.name()));
        match p.structures.get(&s) {
            Some(m) => write_mask(&path, m)?,
            // A stale file from an earlier write would resurrect the structure on load.
            None if path.exists() => fs::remove_file(&path).map_err(io_err(&path))?,
            None => {}
        }
    }
    Ok(())
}

/// Reads a standalone sparse dose file (e.g. a prediction) for a known grid shape.
pub fn load_dose(path: &Path, shape: Shape3) -> Result<Grid, VolumeError> {
    let g = read_values(path, shape)?;
    if g.data().iter().any(|&d| d < 0.0) {
        return Err(VolumeError::Invalid(format!("{}: negative dose", path.display())));
    }
    Ok(g)
}

pub fn write_dose(path: &Path, dose: &Grid) -> Result<(), VolumeError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_values(path, dose)
}

/// Conventional name of the dose file inside a patient directory.
pub fn dose_path(dir: &Path) -> PathBuf {
    dir.join(DOSE)
}
