//! Scanner degradation operator and its adjoint.
//!
//! The low-quality acquisition of an activity map z is modelled as
//!
//! ```text
//! lambda = dose * scale * rebin(project(psf(z))) + background
//! y      ~ Poisson(lambda)
//! ```
//!
//! where `scale` is a per-acquisition calibration fixing the full-dose mean
//! expected counts per bin to the configured `count_scale`. The adjoint chain
//! (block broadcast, matched backprojection, self-adjoint PSF, dose scaling)
//! is exact for the linear part, which the analytic likelihood gradient
//! relies on. `degrade` draws the Poisson counts and builds the MLEM
//! low-resolution comparator image.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::config::ScannerConfig;
use crate::error::Error;
use crate::grid::{GridImage, Sinogram, SinogramKind, Units};
use crate::projector::{backproject, project, ProjectionGeometry};
use crate::psf::{apply_psf, make_psf};
use crate::rng::SplitMix64;

/// Whether data consistency sees the physical PSF or skips it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsfMode {
    /// Scheduled-off: the PSF is replaced by the identity.
    Identity,
    /// The configured Gaussian PSF is applied (and re-applied in the adjoint).
    Full,
}

/// Full-resolution projection geometry implied by the config's grid.
pub fn full_geometry(cfg: &ScannerConfig) -> ProjectionGeometry {
    ProjectionGeometry::covering(
        cfg.n_angles_full,
        cfg.n_radial_full,
        cfg.image_size,
        cfg.image_spacing_mm,
    )
}

/// Geometry of the rebinned sinogram as seen from the low-resolution
/// comparator grid: one ray per rebinned bin, angles centred on their source
/// blocks.
pub fn lr_geometry(cfg: &ScannerConfig) -> ProjectionGeometry {
    let full = full_geometry(cfg);
    let (na, nr) = cfg.rebinned_dims();
    ProjectionGeometry {
        n_angles: na,
        n_radial: nr,
        radial_spacing_mm: full.radial_spacing_mm * cfg.radial_rebin as f64,
        angle_offset_rad: (cfg.angular_rebin as f64 - 1.0) / 2.0 * core::f64::consts::PI
            / cfg.n_angles_full as f64,
        image_size: cfg.lr_grid_size(),
        image_spacing_mm: cfg.target_spacing_mm,
    }
}

/// Sums `ang_factor` x `rad_factor` blocks of bins. Count-preserving: the
/// total is unchanged.
pub fn rebin(sino: &Sinogram, ang_factor: usize, rad_factor: usize) -> Result<Sinogram, Error> {
    if ang_factor == 0 || rad_factor == 0 {
        return Err(Error::Geometry(String::from("rebin factors must be positive")));
    }
    if sino.n_angles() % ang_factor != 0 || sino.n_radial() % rad_factor != 0 {
        return Err(Error::Geometry(format!(
            "sinogram {}x{} not divisible by rebin factors {}x{}",
            sino.n_angles(),
            sino.n_radial(),
            ang_factor,
            rad_factor
        )));
    }
    let na = sino.n_angles() / ang_factor;
    let nr = sino.n_radial() / rad_factor;
    let mut out = vec![0.0f64; na * nr];
    for a in 0..na {
        for r in 0..nr {
            let mut acc = 0.0;
            for da in 0..ang_factor {
                for dr in 0..rad_factor {
                    acc += sino.get(a * ang_factor + da, r * rad_factor + dr);
                }
            }
            out[a * nr + r] = acc;
        }
    }
    Sinogram::new(na, nr, sino.kind(), out)
}

/// Adjoint of [`rebin`]: broadcasts each rebinned value back over its block.
pub fn rebin_adjoint(
    sino: &Sinogram,
    ang_factor: usize,
    rad_factor: usize,
) -> Result<Sinogram, Error> {
    let na = sino.n_angles() * ang_factor;
    let nr = sino.n_radial() * rad_factor;
    let mut out = vec![0.0f64; na * nr];
    for a in 0..sino.n_angles() {
        for r in 0..sino.n_radial() {
            let v = sino.get(a, r);
            for da in 0..ang_factor {
                for dr in 0..rad_factor {
                    out[(a * ang_factor + da) * nr + r * rad_factor + dr] = v;
                }
            }
        }
    }
    Sinogram::new(na, nr, sino.kind(), out)
}

fn count_rate(z: &GridImage, cfg: &ScannerConfig, psf_mode: PsfMode) -> Result<Sinogram, Error> {
    let blurred = match psf_mode {
        PsfMode::Identity => z.clone(),
        PsfMode::Full => apply_psf(z, &make_psf(cfg.psf_fwhm_mm, cfg.image_spacing_mm)?),
    };
    let sino = project(&blurred, &full_geometry(cfg))?;
    rebin(&sino, cfg.angular_rebin, cfg.radial_rebin)
}

/// Resolves the count calibration against a reference activity map: after
/// calibration, the mean expected counts per rebinned bin (minus background)
/// at full dose equals `count_scale`. Done once per acquisition from the
/// ground-truth phantom; the returned config is then held fixed for all
/// likelihood evaluations of that acquisition.
pub fn calibrate_to(cfg: &ScannerConfig, z_ref: &GridImage) -> Result<ScannerConfig, Error> {
    let rate = count_rate(z_ref, cfg, PsfMode::Full)?;
    let mean = rate.mean();
    if !(mean > 0.0) {
        return Err(Error::Domain(String::from(
            "calibration reference projects to zero mean counts",
        )));
    }
    let mut out = cfg.clone();
    out.count_scale_norm = cfg.count_scale / mean;
    Ok(out)
}

/// Expected counts `lambda = dose * scale * rebin(project(psf(z))) + b`.
pub fn forward_expected(
    z: &GridImage,
    cfg: &ScannerConfig,
    psf_mode: PsfMode,
) -> Result<Sinogram, Error> {
    if z.min() < 0.0 {
        return Err(Error::Domain(format!(
            "activity must be nonnegative, min = {}",
            z.min()
        )));
    }
    let rate = count_rate(z, cfg, psf_mode)?;
    let gain = cfg.dose_fraction * cfg.count_scale_norm;
    rate.map(SinogramKind::ExpectedCounts, |v| gain * v + cfg.background_per_bin)
}

/// Exact adjoint of the linear part of [`forward_expected`]:
/// `dose * scale * psf(backproject(rebin_adjoint(residual)))`.
pub fn adjoint_apply(
    residual: &Sinogram,
    cfg: &ScannerConfig,
    psf_mode: PsfMode,
) -> Result<GridImage, Error> {
    let (na, nr) = cfg.rebinned_dims();
    if residual.n_angles() != na || residual.n_radial() != nr {
        return Err(Error::Geometry(format!(
            "residual {}x{} does not match rebinned geometry {}x{}",
            residual.n_angles(),
            residual.n_radial(),
            na,
            nr
        )));
    }
    let spread = rebin_adjoint(residual, cfg.angular_rebin, cfg.radial_rebin)?;
    let back = backproject(&spread, &full_geometry(cfg))?;
    let img = match psf_mode {
        PsfMode::Identity => back,
        PsfMode::Full => apply_psf(&back, &make_psf(cfg.psf_fwhm_mm, cfg.image_spacing_mm)?),
    };
    let gain = cfg.dose_fraction * cfg.count_scale_norm;
    img.map(Units::Activity, |v| gain * v)
}

/// Output of the acquisition simulator.
#[derive(Debug, Clone)]
pub struct Acquisition {
    /// Poisson-sampled counts per rebinned bin.
    pub sampled: Sinogram,
    /// MLEM comparator reconstruction at `target_spacing_mm`.
    pub lr_reference: GridImage,
}

/// Number of MLEM iterations used for the low-resolution comparator.
pub const MLEM_ITERATIONS: usize = 20;

/// Simulates one acquisition: Poisson counts drawn from
/// `forward_expected(z_hr, cfg, Full)` plus the MLEM comparator image.
/// `cfg` should already be calibrated via [`calibrate_to`]. Deterministic
/// given `seed`.
pub fn degrade(z_hr: &GridImage, cfg: &ScannerConfig, seed: u64) -> Result<Acquisition, Error> {
    let lambda = forward_expected(z_hr, cfg, PsfMode::Full)?;
    let mut rng = SplitMix64::new(seed);
    let counts: Vec<f64> = lambda.data().iter().map(|&l| rng.next_poisson(l)).collect();
    let sampled = Sinogram::new(
        lambda.n_angles(),
        lambda.n_radial(),
        SinogramKind::SampledCounts,
        counts,
    )?;
    let lr_reference = mlem_reconstruct(&sampled, cfg, MLEM_ITERATIONS)?;
    Ok(Acquisition { sampled, lr_reference })
}

/// Classical MLEM reconstruction of the sampled counts on the coarse
/// comparator grid, modelling `lambda = kappa * P(z) + b` with one ray per
/// rebinned bin and no PSF (the comparator is deliberately the blurry
/// "as-acquired" image). Uniform unit initialisation.
pub fn mlem_reconstruct(
    y: &Sinogram,
    cfg: &ScannerConfig,
    iterations: usize,
) -> Result<GridImage, Error> {
    let geom = lr_geometry(cfg);
    if y.n_angles() != geom.n_angles || y.n_radial() != geom.n_radial {
        return Err(Error::Geometry(format!(
            "counts {}x{} do not match rebinned geometry {}x{}",
            y.n_angles(),
            y.n_radial(),
            geom.n_angles,
            geom.n_radial
        )));
    }
    // One coarse ray stands in for an ang x rad block of full-resolution bins.
    let kappa = cfg.dose_fraction
        * cfg.count_scale_norm
        * (cfg.angular_rebin * cfg.radial_rebin) as f64;
    let n = geom.image_size;
    let ones = Sinogram::new(
        geom.n_angles,
        geom.n_radial,
        SinogramKind::ExpectedCounts,
        vec![1.0; geom.n_angles * geom.n_radial],
    )?;
    let sens = backproject(&ones, &geom)?;
    let mut z = GridImage::new(n, n, geom.image_spacing_mm, Units::Activity, vec![1.0; n * n])?;
    for _ in 0..iterations {
        let proj = project(&z, &geom)?;
        let ratio = Sinogram::new(
            geom.n_angles,
            geom.n_radial,
            SinogramKind::ExpectedCounts,
            proj.data()
                .iter()
                .zip(y.data())
                .map(|(&p, &c)| c / (kappa * p + cfg.background_per_bin).max(1e-12))
                .collect(),
        )?;
        let update = backproject(&ratio, &geom)?;
        let next: Vec<f64> = z
            .data()
            .iter()
            .zip(update.data().iter().zip(sens.data()))
            .map(|(&zi, (&u, &s))| if s > 1e-9 { zi * kappa * u / (kappa * s) } else { zi })
            .collect();
        z = GridImage::new(n, n, geom.image_spacing_mm, Units::Activity, next)?;
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Float;
    use crate::config::{preset_scanner, ScannerPreset};
    use crate::phantom::{generate, PhantomSpec};

    fn small_config() -> ScannerConfig {
        ScannerConfig {
            image_size: 32,
            image_spacing_mm: 2.0,
            n_angles_full: 24,
            n_radial_full: 32,
            angular_rebin: 2,
            radial_rebin: 2,
            ..ScannerConfig::default()
        }
    }

    fn small_phantom(seed: u64) -> GridImage {
        let spec = PhantomSpec { seed, grid_size: 32, n_lesions: 1, ..PhantomSpec::default() };
        generate(&spec).unwrap().activity
    }

    #[test]
    fn rebin_identity_factors() {
        let s = Sinogram::new(4, 4, SinogramKind::ExpectedCounts, (0..16).map(|i| i as f64).collect()).unwrap();
        let r = rebin(&s, 1, 1).unwrap();
        assert_eq!(r.data(), s.data());
    }

    #[test]
    fn rebin_block_sums() {
        let s = Sinogram::new(4, 4, SinogramKind::ExpectedCounts, vec![1.0; 16]).unwrap();
        let r = rebin(&s, 2, 2).unwrap();
        assert_eq!(r.n_angles(), 2);
        assert_eq!(r.n_radial(), 2);
        assert!(r.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn rebin_preserves_total() {
        let mut rng = SplitMix64::new(3);
        let s = Sinogram::new(
            6,
            8,
            SinogramKind::ExpectedCounts,
            (0..48).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let r = rebin(&s, 3, 2).unwrap();
        assert!((r.sum() - s.sum()).abs() < 1e-12);
    }

    #[test]
    fn rebin_rejects_indivisible() {
        let s = Sinogram::zeros(5, 4, SinogramKind::ExpectedCounts);
        assert!(matches!(rebin(&s, 2, 2), Err(Error::Geometry(_))));
    }

    #[test]
    fn zero_activity_gives_background() {
        let cfg = small_config();
        let z = GridImage::zeros(32, 32, 2.0, Units::Activity);
        let lam = forward_expected(&z, &cfg, PsfMode::Full).unwrap();
        assert!(lam.data().iter().all(|&v| (v - cfg.background_per_bin).abs() < 1e-12));
    }

    #[test]
    fn negative_activity_rejected() {
        let cfg = small_config();
        let mut d = vec![0.0; 32 * 32];
        d[10] = -0.5;
        let z = GridImage::new(32, 32, 2.0, Units::Activity, d).unwrap();
        assert!(matches!(forward_expected(&z, &cfg, PsfMode::Full), Err(Error::Domain(_))));
    }

    #[test]
    fn count_rate_part_is_linear() {
        let cfg = calibrate_to(&small_config(), &small_phantom(40)).unwrap();
        let z = small_phantom(41);
        let z2 = z.map(Units::Activity, |v| 2.0 * v).unwrap();
        let a = forward_expected(&z, &cfg, PsfMode::Full).unwrap();
        let b = forward_expected(&z2, &cfg, PsfMode::Full).unwrap();
        let scale = b
            .data()
            .iter()
            .fold(0.0f64, |m, &v| m.max(v - cfg.background_per_bin));
        for (x, y) in a.data().iter().zip(b.data()) {
            let lin_x = x - cfg.background_per_bin;
            let lin_y = y - cfg.background_per_bin;
            assert!((2.0 * lin_x - lin_y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn calibration_identity() {
        // After calibrating on a phantom, mean(lambda - b) on that phantom
        // equals dose_fraction * count_scale.
        let base = preset_scanner(ScannerPreset::Standard, &small_config());
        let z = small_phantom(42);
        let cfg = calibrate_to(&base, &z).unwrap();
        let lam = forward_expected(&z, &cfg, PsfMode::Full).unwrap();
        let mean_rate = lam.data().iter().map(|v| v - cfg.background_per_bin).sum::<f64>()
            / lam.len() as f64;
        let expected = cfg.dose_fraction * cfg.count_scale;
        assert!(
            ((mean_rate - expected) / expected).abs() < 1e-6,
            "mean {mean_rate} vs {expected}"
        );
    }

    #[test]
    fn composite_adjoint_identity() {
        let cfg = calibrate_to(&small_config(), &small_phantom(50)).unwrap();
        let (na, nr) = cfg.rebinned_dims();
        for seed in 0..20u64 {
            let mut rng = SplitMix64::new(7000 + seed);
            let x = GridImage::new(
                32,
                32,
                2.0,
                Units::Activity,
                (0..32 * 32).map(|_| rng.next_f64()).collect(),
            )
            .unwrap();
            let y = Sinogram::new(
                na,
                nr,
                SinogramKind::ExpectedCounts,
                (0..na * nr).map(|_| rng.next_f64()).collect(),
            )
            .unwrap();
            for mode in [PsfMode::Full, PsfMode::Identity] {
                let ax = forward_expected(&x, &cfg, mode).unwrap();
                // Strip the affine offset to test the linear part.
                let ax_lin = ax
                    .map(SinogramKind::Signed, |v| v - cfg.background_per_bin)
                    .unwrap();
                let aty = adjoint_apply(&y, &cfg, mode).unwrap();
                let lhs = ax_lin.dot(&y);
                let rhs = x.dot(&aty);
                let bound = 1e-5 * ax_lin.norm2() * y.norm2();
                assert!((lhs - rhs).abs() <= bound, "seed {seed} {mode:?}: {lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn adjoint_zero_residual() {
        let cfg = small_config();
        let (na, nr) = cfg.rebinned_dims();
        let g = adjoint_apply(&Sinogram::zeros(na, nr, SinogramKind::ExpectedCounts), &cfg, PsfMode::Full).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_dimension_mismatch() {
        let cfg = small_config();
        let bad = Sinogram::zeros(5, 5, SinogramKind::ExpectedCounts);
        assert!(matches!(adjoint_apply(&bad, &cfg, PsfMode::Full), Err(Error::Geometry(_))));
    }

    #[test]
    fn degrade_is_deterministic() {
        let cfg = calibrate_to(&small_config(), &small_phantom(60)).unwrap();
        let z = small_phantom(60);
        let a = degrade(&z, &cfg, 99).unwrap();
        let b = degrade(&z, &cfg, 99).unwrap();
        assert_eq!(a.sampled.data(), b.sampled.data());
        assert_eq!(a.lr_reference.data(), b.lr_reference.data());
    }

    #[test]
    fn degrade_counts_are_integers() {
        let cfg = calibrate_to(&small_config(), &small_phantom(61)).unwrap();
        let z = small_phantom(61);
        let acq = degrade(&z, &cfg, 1).unwrap();
        assert!(acq.sampled.data().iter().all(|&v| v >= 0.0 && v == v.floor()));
    }

    #[test]
    fn dose_scales_mean_counts() {
        let spec = PhantomSpec { seed: 62, grid_size: 64, n_lesions: 1, ..PhantomSpec::default() };
        let z = generate(&spec).unwrap().activity;
        let hi = calibrate_to(
            &ScannerConfig {
                dose_fraction: 0.10,
                image_size: 64,
                n_angles_full: 120,
                n_radial_full: 128,
                ..small_config()
            },
            &z,
        )
        .unwrap();
        let lo = ScannerConfig { dose_fraction: 0.05, ..hi.clone() };
        let a = degrade(&z, &hi, 5).unwrap();
        let b = degrade(&z, &lo, 6).unwrap();
        let ma = a.sampled.mean() - hi.background_per_bin;
        let mb = b.sampled.mean() - lo.background_per_bin;
        let ratio = ma / mb;
        assert!((ratio - 2.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn mlem_recovers_scale() {
        // MLEM on clean-ish data reproduces the mean activity level of the
        // phantom on the coarse grid.
        let z = small_phantom(63);
        let cfg = calibrate_to(
            &ScannerConfig { target_spacing_mm: 8.0, ..small_config() },
            &z,
        )
        .unwrap();
        let acq = degrade(&z, &cfg, 11).unwrap();
        let lr = &acq.lr_reference;
        assert_eq!(lr.width(), cfg.lr_grid_size());
        let coarse_truth = z.resample(cfg.lr_grid_size(), cfg.target_spacing_mm).unwrap();
        let mean_lr = lr.sum() / lr.len() as f64;
        let mean_truth = coarse_truth.sum() / coarse_truth.len() as f64;
        let rel = (mean_lr - mean_truth).abs() / mean_truth;
        assert!(rel < 0.25, "mean mismatch {rel} ({mean_lr} vs {mean_truth})");
    }
}
