//! Image-domain and projection-domain containers.
//!
//! A [`GridImage`] is a square-pixel 2D grid of finite scalars with a units
//! tag telling activity maps, anatomy maps and model-space images apart. A
//! [`Sinogram`] holds angle-major projection values, either expected count
//! rates or sampled integer counts. Both validate their invariants on
//! construction; no partially-valid instance is observable.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use num_traits::Float;

/// Interpretation of a [`GridImage`]'s values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    /// Tracer activity, MBq/mL-equivalent arbitrary units.
    Activity,
    /// Structural (anatomy) intensity, arbitrary units.
    Anatomy,
    /// Normalised diffusion model space (arcsinh-transformed activity).
    ModelSpace,
}

/// Row-major 2D image with isotropic pixel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    width: usize,
    height: usize,
    spacing_mm: f64,
    units: Units,
    data: Vec<f64>,
}

impl GridImage {
    /// Builds an image, checking the length/finiteness/spacing invariants.
    pub fn new(
        width: usize,
        height: usize,
        spacing_mm: f64,
        units: Units,
        data: Vec<f64>,
    ) -> Result<Self, Error> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(String::from("image dimensions must be positive")));
        }
        if !(spacing_mm > 0.0) || !spacing_mm.is_finite() {
            return Err(Error::Invalid(String::from("spacing_mm must be positive and finite")));
        }
        if data.len() != width * height {
            return Err(Error::Invalid(alloc::format!(
                "data length {} does not equal width*height {}",
                data.len(),
                width * height
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(alloc::format!("non-finite value at index {i}")));
        }
        Ok(Self { width, height, spacing_mm, units, data })
    }

    /// All-zero image.
    pub fn zeros(width: usize, height: usize, spacing_mm: f64, units: Units) -> Self {
        Self::new(width, height, spacing_mm, units, vec![0.0; width * height])
            .expect("zero image is always valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing_mm(&self) -> f64 {
        self.spacing_mm
    }

    pub fn units(&self) -> Units {
        self.units
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Same grid geometry (dims and spacing), possibly different units.
    pub fn same_grid(&self, other: &GridImage) -> bool {
        self.width == other.width
            && self.height == other.height
            && (self.spacing_mm - other.spacing_mm).abs() < 1e-12
    }

    /// Elementwise map into a new image with the given units tag.
    pub fn map(&self, units: Units, f: impl Fn(f64) -> f64) -> Result<Self, Error> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.width, self.height, self.spacing_mm, units, data)
    }

    /// Replaces the units tag.
    pub fn with_units(mut self, units: Units) -> Self {
        self.units = units;
        self
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &GridImage) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Bilinear resample onto a new square grid sharing this image's centre.
    /// Sample points outside the source extent clamp to the edge pixels.
    pub fn resample(&self, size: usize, spacing_mm: f64) -> Result<GridImage, Error> {
        let mut out = Vec::with_capacity(size * size);
        // Physical coordinates of pixel centres, both grids centred at 0.
        let src_cx = (self.width as f64 - 1.0) / 2.0;
        let src_cy = (self.height as f64 - 1.0) / 2.0;
        let dst_c = (size as f64 - 1.0) / 2.0;
        for row in 0..size {
            let y_mm = (row as f64 - dst_c) * spacing_mm;
            let fy = (y_mm / self.spacing_mm + src_cy).clamp(0.0, self.height as f64 - 1.0);
            let r0 = fy.floor() as usize;
            let r1 = (r0 + 1).min(self.height - 1);
            let wy = fy - r0 as f64;
            for col in 0..size {
                let x_mm = (col as f64 - dst_c) * spacing_mm;
                let fx = (x_mm / self.spacing_mm + src_cx).clamp(0.0, self.width as f64 - 1.0);
                let c0 = fx.floor() as usize;
                let c1 = (c0 + 1).min(self.width - 1);
                let wx = fx - c0 as f64;
                let v = self.get(r0, c0) * (1.0 - wy) * (1.0 - wx)
                    + self.get(r0, c1) * (1.0 - wy) * wx
                    + self.get(r1, c0) * wy * (1.0 - wx)
                    + self.get(r1, c1) * wy * wx;
                out.push(v);
            }
        }
        GridImage::new(size, size, spacing_mm, self.units, out)
    }
}

/// Whether sinogram values are Poisson means, sampled integer counts, or
/// signed working values (likelihood residuals and other intermediates).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinogramKind {
    ExpectedCounts,
    SampledCounts,
    Signed,
}

/// Angle-major projection-domain grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    n_angles: usize,
    n_radial: usize,
    kind: SinogramKind,
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(
        n_angles: usize,
        n_radial: usize,
        kind: SinogramKind,
        data: Vec<f64>,
    ) -> Result<Self, Error> {
        if n_angles == 0 || n_radial == 0 {
            return Err(Error::Invalid(String::from("sinogram dimensions must be positive")));
        }
        if data.len() != n_angles * n_radial {
            return Err(Error::Invalid(alloc::format!(
                "data length {} does not equal n_angles*n_radial {}",
                data.len(),
                n_angles * n_radial
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Invalid(alloc::format!("non-finite value at bin {i}")));
            }
            match kind {
                SinogramKind::ExpectedCounts => {
                    if v < 0.0 {
                        return Err(Error::Invalid(alloc::format!(
                            "expected counts must be nonnegative, bin {i} = {v}"
                        )));
                    }
                }
                SinogramKind::SampledCounts => {
                    if v < 0.0 || v != v.floor() {
                        return Err(Error::Invalid(alloc::format!(
                            "sampled counts must be nonnegative integers, bin {i} = {v}"
                        )));
                    }
                }
                SinogramKind::Signed => {}
            }
        }
        Ok(Self { n_angles, n_radial, kind, data })
    }

    pub fn zeros(n_angles: usize, n_radial: usize, kind: SinogramKind) -> Self {
        Self::new(n_angles, n_radial, kind, vec![0.0; n_angles * n_radial])
            .expect("zero sinogram is always valid")
    }

    pub fn n_angles(&self) -> usize {
        self.n_angles
    }

    pub fn n_radial(&self) -> usize {
        self.n_radial
    }

    pub fn kind(&self) -> SinogramKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, angle: usize, radial: usize) -> f64 {
        self.data[angle * self.n_radial + radial]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn dot(&self, other: &Sinogram) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn map(&self, kind: SinogramKind, f: impl Fn(f64) -> f64) -> Result<Self, Error> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.n_angles, self.n_radial, kind, data)
    }
}

/// Boolean lesion support on a [`GridImage`] grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub label: String,
}

impl LesionMask {
    pub fn new(width: usize, height: usize, mask: Vec<bool>, label: String) -> Result<Self, Error> {
        if mask.len() != width * height {
            return Err(Error::Invalid(String::from("mask length must equal width*height")));
        }
        Ok(Self { width, height, mask, label })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}
