//! PSRG grid file format.
//!
//! Layout: magic `PSRG`, u32 LE version (1), u32 LE units tag
//! (0 = activity, 1 = anatomy, 2 = model space, 3 = sinogram, 4 = mask),
//! u32 LE dim0 (height or n_angles), u32 LE dim1 (width or n_radial),
//! f32 LE spacing in mm, then dim0*dim1 f32 LE values row-major. Every
//! image, sinogram and mask in the pipeline travels in this format.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use petsr_core::grid::{GridImage, LesionMask, Sinogram, SinogramKind, Units};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"PSRG";
pub const VERSION: u32 = 1;

pub const TAG_ACTIVITY: u32 = 0;
pub const TAG_ANATOMY: u32 = 1;
pub const TAG_MODEL_SPACE: u32 = 2;
pub const TAG_SINOGRAM: u32 = 3;
pub const TAG_MASK: u32 = 4;

fn units_tag(units: Units) -> u32 {
    match units {
        Units::Activity => TAG_ACTIVITY,
        Units::Anatomy => TAG_ANATOMY,
        Units::ModelSpace => TAG_MODEL_SPACE,
    }
}

fn tag_units(tag: u32) -> Option<Units> {
    match tag {
        TAG_ACTIVITY => Some(Units::Activity),
        TAG_ANATOMY => Some(Units::Anatomy),
        TAG_MODEL_SPACE => Some(Units::ModelSpace),
        _ => None,
    }
}

fn encode(tag: u32, dim0: usize, dim1: usize, spacing_mm: f64, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(dim0 as u32).to_le_bytes());
    out.extend_from_slice(&(dim1 as u32).to_le_bytes());
    out.extend_from_slice(&(spacing_mm as f32).to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

struct Decoded {
    tag: u32,
    dim0: usize,
    dim1: usize,
    spacing_mm: f32,
    values: Vec<f64>,
}

fn decode(bytes: &[u8], path: &Path) -> Result<Decoded> {
    let fail = |msg: &str| CliError::format(path, msg);
    if bytes.len() < 24 {
        return Err(fail("file shorter than the PSRG header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, not a PSRG file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let tag = word(8);
    let dim0 = word(12) as usize;
    let dim1 = word(16) as usize;
    let spacing_mm = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let expected = 24 + 4 * dim0 * dim1;
    if bytes.len() != expected {
        return Err(fail(&format!(
            "payload length {} does not match dims {}x{} ({} expected)",
            bytes.len(),
            dim0,
            dim1,
            expected
        )));
    }
    let values = bytes[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Decoded { tag, dim0, dim1, spacing_mm, values })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn write_image(path: &Path, img: &GridImage) -> Result<()> {
    let bytes = encode(
        units_tag(img.units()),
        img.height(),
        img.width(),
        img.spacing_mm(),
        img.data(),
    );
    write_atomic(path, &bytes)
}

pub fn read_image(path: &Path) -> Result<GridImage> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let d = decode(&bytes, path)?;
    let units = tag_units(d.tag)
        .ok_or_else(|| CliError::format(path, &format!("tag {} is not an image tag", d.tag)))?;
    GridImage::new(d.dim1, d.dim0, d.spacing_mm as f64, units, d.values)
        .map_err(|e| CliError::format(path, &e.to_string()))
}

/// Sinograms store the radial spacing in the header's spacing field.
pub fn write_sinogram(path: &Path, sino: &Sinogram, radial_spacing_mm: f64) -> Result<()> {
    let bytes = encode(
        TAG_SINOGRAM,
        sino.n_angles(),
        sino.n_radial(),
        radial_spacing_mm,
        sino.data(),
    );
    write_atomic(path, &bytes)
}

pub fn read_sinogram(path: &Path, kind: SinogramKind) -> Result<Sinogram> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let d = decode(&bytes, path)?;
    if d.tag != TAG_SINOGRAM {
        return Err(CliError::format(path, &format!("tag {} is not a sinogram", d.tag)));
    }
    Sinogram::new(d.dim0, d.dim1, kind, d.values)
        .map_err(|e| CliError::format(path, &e.to_string()))
}

pub fn write_mask(path: &Path, mask: &LesionMask, spacing_mm: f64) -> Result<()> {
    let values: Vec<f64> = mask.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let bytes = encode(TAG_MASK, mask.height, mask.width, spacing_mm, &values);
    write_atomic(path, &bytes)
}

pub fn read_mask(path: &Path, label: &str) -> Result<LesionMask> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let d = decode(&bytes, path)?;
    if d.tag != TAG_MASK {
        return Err(CliError::format(path, &format!("tag {} is not a mask", d.tag)));
    }
    let mask = d.values.iter().map(|&v| v != 0.0).collect();
    LesionMask::new(d.dim1, d.dim0, mask, label.to_string())
        .map_err(|e| CliError::format(path, &e.to_string()))
}
