//! Whole-image fidelity metrics and lesion-level uptake statistics.
//!
//! PSNR uses the reference peak; SSIM is the mean local index under an
//! 11x11 Gaussian window (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range
//! from the reference) evaluated where the window fits entirely inside the
//! image; NMSE normalises the squared error by the squared reference norm.
//! Note the asymmetry: swapping ref/est changes the PSNR peak and the NMSE
//! denominator by definition.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::grid::{GridImage, LesionMask};
use num_traits::Float;

/// Per-lesion deviation statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionStats {
    pub label: String,
    pub d_suv_max: f64,
    pub d_suv_mean: f64,
    pub lesion_nmse: f64,
}

/// Whole-image metrics plus any lesion rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub nmse: f64,
    pub lesions: Vec<LesionStats>,
}

fn check_dims(reference: &GridImage, estimate: &GridImage) -> Result<(), Error> {
    if reference.width() != estimate.width() || reference.height() != estimate.height() {
        return Err(Error::Geometry(format!(
            "metric inputs differ: {}x{} vs {}x{}",
            reference.width(),
            reference.height(),
            estimate.width(),
            estimate.height()
        )));
    }
    Ok(())
}

/// `10 log10(peak^2 / mse)` with the reference peak; identical images give
/// the +inf sentinel.
pub fn psnr(reference: &GridImage, estimate: &GridImage) -> Result<f64, Error> {
    check_dims(reference, estimate)?;
    let peak = reference.max();
    if !(peak > 0.0) {
        return Err(Error::Domain(String::from("psnr needs a nonzero reference peak")));
    }
    let mse = reference
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// `||ref - est||^2 / ||ref||^2`.
pub fn nmse(reference: &GridImage, estimate: &GridImage) -> Result<f64, Error> {
    check_dims(reference, estimate)?;
    let denom: f64 = reference.data().iter().map(|&v| v * v).sum();
    if denom == 0.0 {
        return Err(Error::Domain(String::from("nmse needs a nonzero reference")));
    }
    let num: f64 = reference
        .data()
        .iter()
        .zip(estimate.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(num / denom)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - r;
            let dx = x as f64 - r;
            w.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean local SSIM. The window shrinks to the largest odd size that fits
/// when an image is smaller than 11 pixels on a side.
pub fn ssim(reference: &GridImage, estimate: &GridImage) -> Result<f64, Error> {
    check_dims(reference, estimate)?;
    let (w, h) = (reference.width(), reference.height());
    let mut win = SSIM_WINDOW.min(w).min(h);
    if win % 2 == 0 {
        win -= 1;
    }
    if win == 0 {
        return Err(Error::Geometry(String::from("image too small for ssim")));
    }
    let kernel = gaussian_window(win, SSIM_SIGMA);
    let range = (reference.max() - reference.min()).max(1e-12);
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);

    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=(h - win) {
        for ox in 0..=(w - win) {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            let mut ki = 0usize;
            for dy in 0..win {
                for dx in 0..win {
                    let k = kernel[ki];
                    ki += 1;
                    let a = reference.get(oy + dy, ox + dx);
                    let b = estimate.get(oy + dy, ox + dx);
                    mu_x += k * a;
                    mu_y += k * b;
                    xx += k * a * a;
                    yy += k * b * b;
                    xy += k * a * b;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            let val = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// `(|max diff|, |mean diff|, masked nmse)` within the lesion support.
pub fn lesion_stats(
    reference: &GridImage,
    estimate: &GridImage,
    mask: &LesionMask,
) -> Result<LesionStats, Error> {
    check_dims(reference, estimate)?;
    if mask.width != reference.width() || mask.height != reference.height() {
        return Err(Error::Geometry(String::from("mask dims must match images")));
    }
    if mask.count() == 0 {
        return Err(Error::Domain(String::from("lesion mask is empty")));
    }
    let mut max_r = f64::NEG_INFINITY;
    let mut max_e = f64::NEG_INFINITY;
    let mut sum_r = 0.0;
    let mut sum_e = 0.0;
    let mut err = 0.0;
    let mut ref_sq = 0.0;
    let mut count = 0usize;
    for (i, &inside) in mask.mask.iter().enumerate() {
        if !inside {
            continue;
        }
        let a = reference.data()[i];
        let b = estimate.data()[i];
        max_r = max_r.max(a);
        max_e = max_e.max(b);
        sum_r += a;
        sum_e += b;
        err += (a - b) * (a - b);
        ref_sq += a * a;
        count += 1;
    }
    if ref_sq == 0.0 {
        return Err(Error::Domain(String::from("lesion reference is zero inside the mask")));
    }
    Ok(LesionStats {
        label: mask.label.clone(),
        d_suv_max: (max_e - max_r).abs(),
        d_suv_mean: (sum_e / count as f64 - sum_r / count as f64).abs(),
        lesion_nmse: err / ref_sq,
    })
}

/// Bundles the whole-image metrics with per-lesion rows.
pub fn report(
    reference: &GridImage,
    estimate: &GridImage,
    masks: &[LesionMask],
) -> Result<MetricReport, Error> {
    let mut lesions = Vec::with_capacity(masks.len());
    for mask in masks {
        lesions.push(lesion_stats(reference, estimate, mask)?);
    }
    Ok(MetricReport {
        psnr_db: psnr(reference, estimate)?,
        ssim: ssim(reference, estimate)?,
        nmse: nmse(reference, estimate)?,
        lesions,
    })
}
