//! Gaussian point-spread-function model.
//!
//! The scanner blur is a separable Gaussian parameterised by its FWHM in mm,
//! sampled on the pixel grid and truncated at four standard deviations.
//! Convolution uses reflect (edge-repeating) boundary handling, which
//! preserves constants and makes the operator exactly self-adjoint.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Error;
use crate::grid::GridImage;
use num_traits::Float;

/// FWHM = 2*sqrt(2 ln 2) * sigma.
pub const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Separable 1D Gaussian kernel sampled in pixel units.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    pub fwhm_mm: f64,
    pub sigma_px: f64,
    /// Odd-length symmetric taps summing to 1.
    pub taps: Vec<f64>,
}

impl PsfKernel {
    pub fn radius(&self) -> usize {
        self.taps.len() / 2
    }

    pub fn is_identity(&self) -> bool {
        self.taps.len() == 1
    }
}

/// Samples the normalised Gaussian with the given FWHM on a grid with
/// `spacing_mm` pixels. `fwhm_mm = 0` yields the identity kernel `[1]`.
pub fn make_psf(fwhm_mm: f64, spacing_mm: f64) -> Result<PsfKernel, Error> {
    if fwhm_mm < 0.0 || !fwhm_mm.is_finite() {
        return Err(Error::Domain(alloc::format!("fwhm_mm must be >= 0, got {fwhm_mm}")));
    }
    if !(spacing_mm > 0.0) {
        return Err(Error::Domain(alloc::format!("spacing_mm must be > 0, got {spacing_mm}")));
    }
    let sigma_px = fwhm_mm / (FWHM_TO_SIGMA * spacing_mm);
    if sigma_px == 0.0 {
        return Ok(PsfKernel { fwhm_mm, sigma_px, taps: vec![1.0] });
    }
    let radius = (4.0 * sigma_px).ceil() as usize;
    let mut taps = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let x = i as f64 - radius as f64;
        taps.push((-0.5 * (x / sigma_px) * (x / sigma_px)).exp());
    }
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    Ok(PsfKernel { fwhm_mm, sigma_px, taps })
}

/// Reflects an out-of-range index back into [0, n) about the grid edges
/// (half-sample symmetric: the edge pixel is repeated).
#[inline]
fn reflect(mut i: isize, n: isize) -> usize {
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Separable 2D convolution with reflect boundaries. The identity kernel
/// returns the input unchanged.
pub fn apply_psf(img: &GridImage, kernel: &PsfKernel) -> GridImage {
    if kernel.is_identity() {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let r = kernel.radius() as isize;
    let taps = &kernel.taps;
    let src = img.data();

    // Horizontal pass.
    let mut tmp = vec![0.0f64; w * h];
    for row in 0..h {
        let base = row * w;
        for col in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let ci = reflect(col as isize + k as isize - r, w as isize);
                acc += t * src[base + ci];
            }
            tmp[base + col] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f64; w * h];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let ri = reflect(row as isize + k as isize - r, h as isize);
                acc += t * tmp[ri * w + col];
            }
            out[row * w + col] = acc;
        }
    }
    GridImage::new(w, h, img.spacing_mm(), img.units(), out)
        .expect("convolution of a valid image stays valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Units;
    use crate::rng::SplitMix64;

    #[test]
    fn zero_fwhm_is_identity() {
        let k = make_psf(0.0, 2.0).unwrap();
        assert_eq!(k.taps, vec![1.0]);
        assert!(k.is_identity());
    }

    #[test]
    fn sigma_matches_closed_form() {
        let k = make_psf(8.0, 2.0).unwrap();
        let expected = 8.0 / (2.0 * (2.0 * 2.0f64.ln()).sqrt() * 2.0);
        assert!((k.sigma_px - expected).abs() < 1e-12);
        assert!((k.sigma_px - 1.69864).abs() < 1e-5);
        // Truncation at 4 sigma.
        assert_eq!(k.taps.len(), 2 * (4.0 * expected).ceil() as usize + 1);
    }

    #[test]
    fn taps_normalised_and_symmetric() {
        for &fwhm in &[1.0, 4.0, 8.0, 12.0, 25.0] {
            let k = make_psf(fwhm, 2.0).unwrap();
            let sum: f64 = k.taps.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "fwhm={fwhm} sum={sum}");
            let n = k.taps.len();
            for i in 0..n / 2 {
                assert_eq!(k.taps[i], k.taps[n - 1 - i]);
            }
        }
    }

    #[test]
    fn uniform_image_is_preserved() {
        let img = GridImage::new(16, 16, 2.0, Units::Activity, alloc::vec![2.5; 256]).unwrap();
        let k = make_psf(8.0, 2.0).unwrap();
        let out = apply_psf(&img, &k);
        for &v in out.data() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn central_delta_gives_tap_outer_product() {
        let k = make_psf(8.0, 2.0).unwrap();
        let n = 32;
        let mut data = alloc::vec![0.0; n * n];
        data[(n / 2) * n + n / 2] = 1.0;
        let img = GridImage::new(n, n, 2.0, Units::Activity, data).unwrap();
        let out = apply_psf(&img, &k);
        let r = k.radius();
        for (i, &ti) in k.taps.iter().enumerate() {
            for (j, &tj) in k.taps.iter().enumerate() {
                let row = n / 2 + i - r;
                let col = n / 2 + j - r;
                assert!((out.get(row, col) - ti * tj).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn interior_support_preserves_total() {
        // Random 32x32 image with a zero 8-px border: no mass reaches the
        // boundary, so total sum is preserved.
        let n = 32;
        let mut rng = SplitMix64::new(5);
        let mut data = alloc::vec![0.0; n * n];
        for row in 8..n - 8 {
            for col in 8..n - 8 {
                data[row * n + col] = rng.next_f64();
            }
        }
        let img = GridImage::new(n, n, 2.0, Units::Activity, data).unwrap();
        let k = make_psf(8.0, 2.0).unwrap();
        let out = apply_psf(&img, &k);
        let rel = (out.sum() - img.sum()).abs() / img.sum();
        assert!(rel < 1e-6, "relative sum change {rel}");
    }

    #[test]
    fn psf_is_self_adjoint() {
        let n = 24;
        let mut rng = SplitMix64::new(17);
        let k = make_psf(6.0, 2.0).unwrap();
        for _ in 0..5 {
            let x = GridImage::new(
                n,
                n,
                2.0,
                Units::Activity,
                (0..n * n).map(|_| rng.next_f64()).collect(),
            )
            .unwrap();
            let y = GridImage::new(
                n,
                n,
                2.0,
                Units::Activity,
                (0..n * n).map(|_| rng.next_f64()).collect(),
            )
            .unwrap();
            let lhs = apply_psf(&x, &k).dot(&y);
            let rhs = x.dot(&apply_psf(&y, &k));
            assert!(
                (lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0),
                "lhs={lhs} rhs={rhs}"
            );
        }
    }
}
