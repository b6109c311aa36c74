//! On-disk formats.
//!
//! A volume is stored as a `.vol` JSON header naming a raw little-endian
//! payload file:
//!
//! ```json
//! { "dims": [nx,ny,nz], "spacing": [sx,sy,sz], "origin": [ox,oy,oz],
//!   "dtype": "f32le", "data": "image.raw" }
//! ```
//!
//! The payload holds `nx*ny*nz` values in x-fastest order; scalar volumes
//! use dtype `f32le`, label volumes `u16le`. The `data` path is relative to
//! the header file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, LabelVolume, Volume};

#[derive(Debug, Serialize, Deserialize)]
struct VolHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
    data: String,
}

fn raw_name(header_path: &Path) -> String {
    let stem = header_path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    format!("{stem}.raw")
}

fn resolve_data_path(header_path: &Path, rel: &str) -> std::path::PathBuf {
    match header_path.parent() {
        Some(dir) => dir.join(rel),
        None => std::path::PathBuf::from(rel),
    }
}

pub fn write_f32_raw(path: &Path, data: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f32_raw(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes ({expected_len} f32), found {}",
            path.display(),
            expected_len * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_u16_raw(path: &Path, data: &[u16]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_u16_raw(path: &Path, expected_len: usize) -> Result<Vec<u16>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != expected_len * 2 {
        return Err(Error::Format(format!(
            "{}: expected {} bytes ({expected_len} u16), found {}",
            path.display(),
            expected_len * 2,
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

fn write_header(path: &Path, header: &VolHeader) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, header)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_header(path: &Path) -> Result<VolHeader> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

/// Write a scalar volume: `path` gets the JSON header, the raw payload goes
/// to a sibling `.raw` file.
pub fn write_volume(path: &Path, vol: &Volume) -> Result<()> {
    let raw = raw_name(path);
    let header = VolHeader {
        dims: vol.dims(),
        spacing: vol.spacing(),
        origin: vol.origin(),
        dtype: "f32le".into(),
        data: raw.clone(),
    };
    write_header(path, &header)?;
    write_f32_raw(&resolve_data_path(path, &raw), vol.data())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    if header.dtype != "f32le" {
        return Err(Error::Format(format!(
            "{}: expected dtype f32le, found {}",
            path.display(),
            header.dtype
        )));
    }
    let geom = Geometry::new(header.dims, header.spacing, header.origin)?;
    let data = read_f32_raw(&resolve_data_path(path, &header.data), geom.num_voxels())?;
    Volume::new(geom, data)
}

/// Write a label volume with dtype `u16le`.
pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let geom = labels.geometry();
    let raw = raw_name(path);
    let header = VolHeader {
        dims: geom.dims,
        spacing: geom.spacing,
        origin: geom.origin,
        dtype: "u16le".into(),
        data: raw.clone(),
    };
    write_header(path, &header)?;
    write_u16_raw(&resolve_data_path(path, &raw), labels.data())
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let header = read_header(path)?;
    if header.dtype != "u16le" {
        return Err(Error::Format(format!(
            "{}: expected dtype u16le, found {}",
            path.display(),
            header.dtype
        )));
    }
    let geom = Geometry::new(header.dims, header.spacing, header.origin)?;
    let data = read_u16_raw(&resolve_data_path(path, &header.data), geom.num_voxels())?;
    LabelVolume::new(geom, data)
}
