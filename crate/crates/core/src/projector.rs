//! Parallel-beam projection and its matched adjoint.
//!
//! `project` computes ray-driven line integrals with bilinear interpolation
//! at a step of half the image spacing, scaled by the step length in mm.
//! `backproject` transposes the very same interpolation scatter, so the pair
//! is an exact adjoint of the discretised forward operator rather than an
//! independent discretisation; the analytic likelihood gradient depends on
//! this matching.

use alloc::vec;

use crate::error::Error;
use crate::grid::{GridImage, Sinogram, SinogramKind, Units};
use num_traits::Float;

/// Geometry tying a square image grid to a parallel-beam sinogram.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionGeometry {
    /// Projection angles, uniformly spaced over [0, pi) starting at
    /// `angle_offset_rad`.
    pub n_angles: usize,
    /// Radial bins, centred symmetrically about the rotation centre.
    pub n_radial: usize,
    /// Radial bin spacing, mm.
    pub radial_spacing_mm: f64,
    /// Offset of the first angle, radians. Rebinned geometries use this to
    /// centre each angle on its source block.
    pub angle_offset_rad: f64,
    /// Side length of the square image grid.
    pub image_size: usize,
    /// Image pixel spacing, mm.
    pub image_spacing_mm: f64,
}

impl ProjectionGeometry {
    /// Minimal covering geometry: the radial extent equals the image
    /// diagonal.
    pub fn covering(
        n_angles: usize,
        n_radial: usize,
        image_size: usize,
        image_spacing_mm: f64,
    ) -> Self {
        let diag = core::f64::consts::SQRT_2 * image_size as f64 * image_spacing_mm;
        Self {
            n_angles,
            n_radial,
            radial_spacing_mm: diag / n_radial as f64,
            angle_offset_rad: 0.0,
            image_size,
            image_spacing_mm,
        }
    }

    /// Checks the radial-coverage invariant.
    pub fn covers_diagonal(&self) -> bool {
        let diag = core::f64::consts::SQRT_2 * self.image_size as f64 * self.image_spacing_mm;
        self.n_radial as f64 * self.radial_spacing_mm >= diag - 1e-9
    }

    fn check_image(&self, img: &GridImage) -> Result<(), Error> {
        if img.width() != self.image_size || img.height() != self.image_size {
            return Err(Error::Geometry(alloc::format!(
                "image {}x{} does not match geometry size {}",
                img.width(),
                img.height(),
                self.image_size
            )));
        }
        Ok(())
    }

    fn check_sino(&self, sino: &Sinogram) -> Result<(), Error> {
        if sino.n_angles() != self.n_angles || sino.n_radial() != self.n_radial {
            return Err(Error::Geometry(alloc::format!(
                "sinogram {}x{} does not match geometry {}x{}",
                sino.n_angles(),
                sino.n_radial(),
                self.n_angles,
                self.n_radial
            )));
        }
        Ok(())
    }
}

/// Marching plan shared by the forward and adjoint passes so both touch the
/// same sample positions with the same weights.
struct RayPlan {
    step_mm: f64,
    n_steps: usize,
    half_extent_mm: f64,
    centre: f64,
}

impl RayPlan {
    fn new(geom: &ProjectionGeometry) -> Self {
        let step_mm = geom.image_spacing_mm / 2.0;
        let half_extent_mm =
            core::f64::consts::SQRT_2 * geom.image_size as f64 * geom.image_spacing_mm / 2.0;
        let n_steps = (2.0 * half_extent_mm / step_mm) as usize + 1;
        Self {
            step_mm,
            n_steps,
            half_extent_mm,
            centre: (geom.image_size as f64 - 1.0) / 2.0,
        }
    }
}

/// Parallel-beam line integrals of `img` under `geom`.
pub fn project(img: &GridImage, geom: &ProjectionGeometry) -> Result<Sinogram, Error> {
    geom.check_image(img)?;
    let plan = RayPlan::new(geom);
    let n = geom.image_size;
    let nf = n as f64;
    let src = img.data();
    let mut out = vec![0.0f64; geom.n_angles * geom.n_radial];

    for a in 0..geom.n_angles {
        let theta = geom.angle_offset_rad
            + a as f64 * core::f64::consts::PI / geom.n_angles as f64;
        let (sin_t, cos_t) = (theta.sin(), theta.cos());
        // Radial axis u = (cos, sin); ray direction v = (-sin, cos).
        for i in 0..geom.n_radial {
            let s = (i as f64 - (geom.n_radial as f64 - 1.0) / 2.0) * geom.radial_spacing_mm;
            // Start position in pixel coordinates, marching along v.
            let mut px = (s * cos_t - plan.half_extent_mm * -sin_t) / geom.image_spacing_mm
                + plan.centre;
            let mut py = (s * sin_t - plan.half_extent_mm * cos_t) / geom.image_spacing_mm
                + plan.centre;
            let dx = -sin_t * plan.step_mm / geom.image_spacing_mm;
            let dy = cos_t * plan.step_mm / geom.image_spacing_mm;
            let mut acc = 0.0;
            for _ in 0..plan.n_steps {
                if px > -1.0 && px < nf && py > -1.0 && py < nf {
                    let c0 = px.floor();
                    let r0 = py.floor();
                    let wx = px - c0;
                    let wy = py - r0;
                    let c0i = c0 as isize;
                    let r0i = r0 as isize;
                    // Bilinear gather; samples outside the grid contribute 0.
                    let mut v = 0.0;
                    if r0i >= 0 && c0i >= 0 {
                        v += src[r0i as usize * n + c0i as usize] * (1.0 - wx) * (1.0 - wy);
                    }
                    if r0i >= 0 && c0i + 1 < n as isize {
                        v += src[r0i as usize * n + (c0i + 1) as usize] * wx * (1.0 - wy);
                    }
                    if r0i + 1 < n as isize && c0i >= 0 {
                        v += src[(r0i + 1) as usize * n + c0i as usize] * (1.0 - wx) * wy;
                    }
                    if r0i + 1 < n as isize && c0i + 1 < n as isize {
                        v += src[(r0i + 1) as usize * n + (c0i + 1) as usize] * wx * wy;
                    }
                    acc += v;
                }
                px += dx;
                py += dy;
            }
            out[a * geom.n_radial + i] = acc * plan.step_mm;
        }
    }
    Sinogram::new(geom.n_angles, geom.n_radial, SinogramKind::ExpectedCounts, out)
        .map_err(|_| Error::Numerical(alloc::string::String::from("projection produced invalid values")))
}

/// Exact transpose of [`project`]: scatters each sinogram value back through
/// the same bilinear weights.
pub fn backproject(sino: &Sinogram, geom: &ProjectionGeometry) -> Result<GridImage, Error> {
    geom.check_sino(sino)?;
    let plan = RayPlan::new(geom);
    let n = geom.image_size;
    let nf = n as f64;
    let mut out = vec![0.0f64; n * n];

    for a in 0..geom.n_angles {
        let theta = geom.angle_offset_rad
            + a as f64 * core::f64::consts::PI / geom.n_angles as f64;
        let (sin_t, cos_t) = (theta.sin(), theta.cos());
        for i in 0..geom.n_radial {
            let val = sino.get(a, i) * plan.step_mm;
            if val == 0.0 {
                continue;
            }
            let s = (i as f64 - (geom.n_radial as f64 - 1.0) / 2.0) * geom.radial_spacing_mm;
            let mut px = (s * cos_t - plan.half_extent_mm * -sin_t) / geom.image_spacing_mm
                + plan.centre;
            let mut py = (s * sin_t - plan.half_extent_mm * cos_t) / geom.image_spacing_mm
                + plan.centre;
            let dx = -sin_t * plan.step_mm / geom.image_spacing_mm;
            let dy = cos_t * plan.step_mm / geom.image_spacing_mm;
            for _ in 0..plan.n_steps {
                if px > -1.0 && px < nf && py > -1.0 && py < nf {
                    let c0 = px.floor();
                    let r0 = py.floor();
                    let wx = px - c0;
                    let wy = py - r0;
                    let c0i = c0 as isize;
                    let r0i = r0 as isize;
                    if r0i >= 0 && c0i >= 0 {
                        out[r0i as usize * n + c0i as usize] += val * (1.0 - wx) * (1.0 - wy);
                    }
                    if r0i >= 0 && c0i + 1 < n as isize {
                        out[r0i as usize * n + (c0i + 1) as usize] += val * wx * (1.0 - wy);
                    }
                    if r0i + 1 < n as isize && c0i >= 0 {
                        out[(r0i + 1) as usize * n + c0i as usize] += val * (1.0 - wx) * wy;
                    }
                    if r0i + 1 < n as isize && c0i + 1 < n as isize {
                        out[(r0i + 1) as usize * n + (c0i + 1) as usize] += val * wx * wy;
                    }
                }
                px += dx;
                py += dy;
            }
        }
    }
    GridImage::new(n, n, geom.image_spacing_mm, Units::Activity, out)
        .map_err(|_| Error::Numerical(alloc::string::String::from("backprojection produced invalid values")))
}
