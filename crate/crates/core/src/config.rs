//! Scanner and sampler configuration records.
//!
//! [`ScannerConfig`] parameterises the degradation operator end to end: PSF
//! width, full-resolution projection geometry, rebinning factors, dose
//! fraction, count calibration and constant background. [`PpcrConfig`] holds
//! every knob of the progressive refinement sampler. Both validate into a
//! list of human-readable violations rather than aborting.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;

/// One violated invariant found by [`ScannerConfig::validate`] or
/// [`PpcrConfig::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Degradation presets: the standard (x4) and out-of-distribution (x6)
/// protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScannerPreset {
    Standard,
    Ood,
}

impl ScannerPreset {
    pub fn parse(name: &str) -> Result<Self, Error> {
        match name {
            "standard" => Ok(Self::Standard),
            "ood" => Ok(Self::Ood),
            other => Err(Error::Config(format!("unknown scanner preset '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Ood => "ood",
        }
    }
}

/// Full parameterisation of the scanner degradation operator
/// `A(z) = dose * scale * rebin(project(psf(z))) + background`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScannerConfig {
    /// Gaussian PSF full width at half maximum, mm. Zero disables blurring.
    pub psf_fwhm_mm: f64,
    /// Side length of the (square) high-resolution activity grid, pixels.
    pub image_size: usize,
    /// High-resolution pixel spacing, mm.
    pub image_spacing_mm: f64,
    /// Projection angles of the full-resolution sinogram.
    pub n_angles_full: usize,
    /// Radial bins of the full-resolution sinogram.
    pub n_radial_full: usize,
    /// Angular rebinning factor (adjacent-bin summation).
    pub angular_rebin: usize,
    /// Radial rebinning factor.
    pub radial_rebin: usize,
    /// Fraction of the full dose, in (0, 1].
    pub dose_fraction: f64,
    /// Constant additive background per rebinned bin (randoms/scatter stand-in).
    pub background_per_bin: f64,
    /// Target mean expected counts per rebinned bin at full dose.
    pub count_scale: f64,
    /// Calibration multiplier resolved per acquisition so that the full-dose
    /// mean expected counts per bin equals `count_scale`. 1.0 until
    /// calibrated against a reference activity map.
    pub count_scale_norm: f64,
    /// Pixel spacing of the low-resolution comparator reconstruction, mm.
    pub target_spacing_mm: f64,
}

impl Default for ScannerConfig {
    /// Standard-protocol defaults on the 128x128 / 2 mm grid with a
    /// 120x128 full-resolution sinogram.
    fn default() -> Self {
        let dose_fraction = 0.10;
        let count_scale = 50.0;
        Self {
            psf_fwhm_mm: 8.0,
            image_size: 128,
            image_spacing_mm: 2.0,
            n_angles_full: 120,
            n_radial_full: 128,
            angular_rebin: 2,
            radial_rebin: 2,
            dose_fraction,
            background_per_bin: default_background(dose_fraction, count_scale),
            count_scale,
            count_scale_norm: 1.0,
            target_spacing_mm: 8.0,
        }
    }
}

/// Default background rule: 5% of the mean expected counts of the degraded
/// sinogram. With a calibrated operator that mean is exactly
/// `dose_fraction * count_scale`, so the rule reduces to this closed form.
pub fn default_background(dose_fraction: f64, count_scale: f64) -> f64 {
    0.05 * dose_fraction * count_scale
}

/// Applies a degradation preset's FWHM/dose/rebinning/target-spacing values
/// on top of `base`; all other fields are kept. The background is re-derived
/// from the preset's dose via the default 5% rule.
pub fn preset_scanner(preset: ScannerPreset, base: &ScannerConfig) -> ScannerConfig {
    let mut cfg = base.clone();
    match preset {
        ScannerPreset::Standard => {
            cfg.psf_fwhm_mm = 8.0;
            cfg.dose_fraction = 0.10;
            cfg.angular_rebin = 2;
            cfg.radial_rebin = 2;
            cfg.target_spacing_mm = 8.0;
        }
        ScannerPreset::Ood => {
            cfg.psf_fwhm_mm = 12.0;
            cfg.dose_fraction = 0.05;
            cfg.angular_rebin = 3;
            cfg.radial_rebin = 2;
            cfg.target_spacing_mm = 12.0;
        }
    }
    cfg.background_per_bin = default_background(cfg.dose_fraction, cfg.count_scale);
    cfg
}

impl ScannerConfig {
    /// Collects every violated invariant; an empty list means the config is
    /// usable.
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut check = |ok: bool, field: &'static str, message: String| {
            if !ok {
                v.push(Violation { field, message });
            }
        };
        check(self.psf_fwhm_mm >= 0.0, "psf_fwhm_mm", format!("must be >= 0, got {}", self.psf_fwhm_mm));
        check(self.image_size > 0, "image_size", String::from("must be positive"));
        check(
            self.image_spacing_mm > 0.0,
            "image_spacing_mm",
            format!("must be > 0, got {}", self.image_spacing_mm),
        );
        check(self.n_angles_full > 0, "n_angles_full", String::from("must be positive"));
        check(self.n_radial_full > 0, "n_radial_full", String::from("must be positive"));
        check(self.angular_rebin > 0, "angular_rebin", String::from("must be positive"));
        check(self.radial_rebin > 0, "radial_rebin", String::from("must be positive"));
        if self.angular_rebin > 0 && self.n_angles_full % self.angular_rebin != 0 {
            check(
                false,
                "angular_rebin",
                format!("n_angles_full {} not divisible by {}", self.n_angles_full, self.angular_rebin),
            );
        }
        if self.radial_rebin > 0 && self.n_radial_full % self.radial_rebin != 0 {
            check(
                false,
                "radial_rebin",
                format!("n_radial_full {} not divisible by {}", self.n_radial_full, self.radial_rebin),
            );
        }
        check(
            self.dose_fraction > 0.0 && self.dose_fraction <= 1.0,
            "dose_fraction",
            String::from("dose_fraction must be in (0,1]"),
        );
        check(
            self.background_per_bin >= 0.0,
            "background_per_bin",
            format!("must be >= 0, got {}", self.background_per_bin),
        );
        check(self.count_scale > 0.0, "count_scale", format!("must be > 0, got {}", self.count_scale));
        check(
            self.count_scale_norm > 0.0,
            "count_scale_norm",
            format!("must be > 0, got {}", self.count_scale_norm),
        );
        check(
            self.target_spacing_mm > 0.0,
            "target_spacing_mm",
            format!("must be > 0, got {}", self.target_spacing_mm),
        );
        v
    }

    /// Rebinned sinogram dimensions `(n_angles, n_radial)`.
    pub fn rebinned_dims(&self) -> (usize, usize) {
        (
            self.n_angles_full / self.angular_rebin,
            self.n_radial_full / self.radial_rebin,
        )
    }

    /// Side length of the low-resolution comparator grid at
    /// `target_spacing_mm`, covering (approximately) the same field of view.
    pub fn lr_grid_size(&self) -> usize {
        let fov_mm = self.image_size as f64 * self.image_spacing_mm;
        let n = (fov_mm / self.target_spacing_mm + 0.5) as usize;
        n.max(1)
    }
}

/// Hyperparameters of the progressive physics-constrained refinement loop.
#[derive(Debug, Clone, PartialEq)]
pub struct PpcrConfig {
    /// Number of reverse DDIM steps.
    pub n_ddim_steps: usize,
    /// 1-based sampler step at which full-PSF data consistency begins;
    /// `n_ddim_steps + 1` keeps the identity PSF throughout.
    pub psf_on_from_step: usize,
    /// Inner data-consistency iterations at the first sampler step.
    pub m_start: usize,
    /// Inner data-consistency iterations at the last sampler step.
    pub m_end: usize,
    /// Data-consistency gradient step size.
    pub eta_dc: f64,
    /// Nesterov momentum coefficient in [0, 1).
    pub mu_nesterov: f64,
    /// Warm-start blend of the previous step's refined activity, in [0, 1].
    pub alpha_warmstart: f64,
    /// Project each iterate onto the nonnegative orthant.
    pub nonneg_projection: bool,
}

impl Default for PpcrConfig {
    /// Inference defaults: 50 DDIM steps, no-PSF consistency for steps 1-35
    /// and full-PSF for 36-50, inner iterations ramped 2 to 20, Nesterov 0.9
    /// with warm-start 0.3, step size 0.05.
    fn default() -> Self {
        Self {
            n_ddim_steps: 50,
            psf_on_from_step: 36,
            m_start: 2,
            m_end: 20,
            eta_dc: 0.05,
            mu_nesterov: 0.9,
            alpha_warmstart: 0.3,
            nonneg_projection: true,
        }
    }
}

impl PpcrConfig {
    pub fn validate(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let mut check = |ok: bool, field: &'static str, message: String| {
            if !ok {
                v.push(Violation { field, message });
            }
        };
        check(self.n_ddim_steps > 0, "n_ddim_steps", String::from("must be positive"));
        check(
            self.psf_on_from_step >= 1 && self.psf_on_from_step <= self.n_ddim_steps + 1,
            "psf_on_from_step",
            format!(
                "must be in [1, n_ddim_steps+1] = [1, {}], got {}",
                self.n_ddim_steps + 1,
                self.psf_on_from_step
            ),
        );
        check(
            self.m_start <= self.m_end,
            "m_start",
            format!("m_start {} must be <= m_end {}", self.m_start, self.m_end),
        );
        check(self.eta_dc > 0.0, "eta_dc", format!("must be > 0, got {}", self.eta_dc));
        check(
            (0.0..1.0).contains(&self.mu_nesterov),
            "mu_nesterov",
            format!("must be in [0,1), got {}", self.mu_nesterov),
        );
        check(
            (0.0..=1.0).contains(&self.alpha_warmstart),
            "alpha_warmstart",
            format!("must be in [0,1], got {}", self.alpha_warmstart),
        );
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_preset_matches_protocol() {
        let cfg = preset_scanner(ScannerPreset::Standard, &ScannerConfig::default());
        assert_eq!(cfg.psf_fwhm_mm, 8.0);
        assert_eq!(cfg.dose_fraction, 0.10);
        assert_eq!(cfg.angular_rebin, 2);
        assert_eq!(cfg.radial_rebin, 2);
        assert_eq!(cfg.target_spacing_mm, 8.0);
    }

    #[test]
    fn ood_preset_matches_protocol() {
        let cfg = preset_scanner(ScannerPreset::Ood, &ScannerConfig::default());
        assert_eq!(cfg.psf_fwhm_mm, 12.0);
        assert_eq!(cfg.dose_fraction, 0.05);
        assert_eq!(cfg.angular_rebin, 3);
        assert_eq!(cfg.radial_rebin, 2);
        assert_eq!(cfg.target_spacing_mm, 12.0);
    }

    #[test]
    fn presets_are_pure() {
        let base = ScannerConfig::default();
        let a = preset_scanner(ScannerPreset::Standard, &base);
        let b = preset_scanner(ScannerPreset::Standard, &base);
        assert_eq!(a, b);
        let c = preset_scanner(ScannerPreset::Ood, &base);
        let d = preset_scanner(ScannerPreset::Ood, &base);
        assert_eq!(c, d);
    }

    #[test]
    fn presets_validate_clean() {
        let base = ScannerConfig::default();
        assert!(preset_scanner(ScannerPreset::Standard, &base).validate().is_empty());
        assert!(preset_scanner(ScannerPreset::Ood, &base).validate().is_empty());
        assert!(PpcrConfig::default().validate().is_empty());
    }

    #[test]
    fn zero_dose_is_flagged() {
        let mut cfg = ScannerConfig::default();
        cfg.dose_fraction = 0.0;
        let v = cfg.validate();
        assert!(v.iter().any(|x| x.message == "dose_fraction must be in (0,1]"));
    }

    #[test]
    fn divisibility_is_flagged() {
        let mut cfg = ScannerConfig::default();
        cfg.n_angles_full = 90;
        cfg.angular_rebin = 4;
        let v = cfg.validate();
        assert!(v.iter().any(|x| x.field == "angular_rebin"));
    }

    #[test]
    fn validation_never_aborts() {
        // A config violating several invariants at once reports all of them.
        let cfg = ScannerConfig {
            psf_fwhm_mm: -1.0,
            dose_fraction: 2.0,
            count_scale: 0.0,
            ..ScannerConfig::default()
        };
        let v = cfg.validate();
        assert!(v.len() >= 3);
    }

    #[test]
    fn unknown_preset_name_rejected() {
        assert!(matches!(ScannerPreset::parse("fancy"), Err(Error::Config(_))));
        assert_eq!(ScannerPreset::parse("standard").unwrap(), ScannerPreset::Standard);
        assert_eq!(ScannerPreset::parse("ood").unwrap(), ScannerPreset::Ood);
    }

    #[test]
    fn rebinned_dims_for_both_presets() {
        let base = ScannerConfig::default();
        assert_eq!(preset_scanner(ScannerPreset::Standard, &base).rebinned_dims(), (60, 64));
        assert_eq!(preset_scanner(ScannerPreset::Ood, &base).rebinned_dims(), (40, 64));
    }

    #[test]
    fn ppcr_step_bound() {
        let mut cfg = PpcrConfig::default();
        cfg.psf_on_from_step = 52;
        assert!(!cfg.validate().is_empty());
        cfg.psf_on_from_step = 51; // n_ddim_steps + 1 disables the full-PSF phase
        assert!(cfg.validate().is_empty());
    }
}
