//! DDIM reverse sampling with progressive physics-constrained refinement.
//!
//! Each sampler step predicts noise, forms the Tweedie estimate, maps it to
//! activity space and refines it with Nesterov-accelerated gradient steps on
//! the Poisson likelihood before re-entering the deterministic DDIM update.
//! Three schedules make the refinement progressive: the PSF inside the data
//! consistency operator switches from identity (early, noisy steps) to the
//! full scanner PSF (late steps); the inner iteration count ramps linearly;
//! and both the refined activity (warm-start blend) and the momentum carry
//! over from step to step.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::{PpcrConfig, ScannerConfig};
use crate::diffusion::{
    from_model_space_clamped, to_model_space, tweedie_estimate, Denoiser, NoiseSchedule,
    TransformParams,
};
use crate::error::Error;
use crate::forward::PsfMode;
use crate::grid::{GridImage, Sinogram, Units};
use crate::likelihood::{poisson_nll, poisson_nll_grad, DEFAULT_EPSILON};
use crate::net::CondMode;
use crate::rng::SplitMix64;
use num_traits::Float;

/// Evenly spaced decreasing training-timestep indices for the reverse loop.
/// `n_steps = T` yields T..1; the stride is the integer quotient `T / n`.
pub fn ddim_timesteps(n_steps: usize, t_train: usize) -> Result<Vec<usize>, Error> {
    if n_steps == 0 || n_steps > t_train {
        return Err(Error::Config(format!(
            "n_steps must be in [1, T] = [1, {t_train}], got {n_steps}"
        )));
    }
    let stride = t_train / n_steps;
    Ok((0..n_steps).map(|i| t_train - i * stride).collect())
}

/// PSF schedule: identity before `psf_on_from_step`, full from it onward.
pub fn psf_mode_for_step(step: usize, cfg: &PpcrConfig) -> PsfMode {
    if step < cfg.psf_on_from_step {
        PsfMode::Identity
    } else {
        PsfMode::Full
    }
}

/// Linear inner-iteration ramp from `m_start` (step 1) to `m_end` (last
/// step), rounded to the nearest integer.
pub fn inner_iters_for_step(step: usize, cfg: &PpcrConfig) -> usize {
    if cfg.n_ddim_steps <= 1 {
        return cfg.m_end;
    }
    let frac = (step - 1) as f64 / (cfg.n_ddim_steps - 1) as f64;
    let m = cfg.m_start as f64 + (cfg.m_end as f64 - cfg.m_start as f64) * frac;
    (m + 0.5).floor() as usize
}

/// Per-step diagnostics recorded in the sampler trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    /// 1-based sampler step, counted from the noisiest.
    pub step: usize,
    /// Training timestep handled at this step.
    pub t_train: usize,
    pub psf_mode: PsfMode,
    pub m_t: usize,
    pub eta: f64,
    pub nll_before: f64,
    pub nll_after: f64,
}

/// Sampler bookkeeping; returned alongside the reconstruction.
#[derive(Debug, Clone)]
pub struct SamplerState {
    /// 1-based index of the last completed step.
    pub step_index: usize,
    /// Model-space state after the final DDIM update.
    pub x_t: GridImage,
    /// Previous step's refined activity (warm-start memory).
    pub z_prev_refined: Option<GridImage>,
    /// Nesterov velocity in activity space.
    pub momentum: Option<GridImage>,
    pub trace: Vec<StepTrace>,
}

/// Outcome of [`dc_refine`].
pub struct DcRefineOutput {
    pub z: GridImage,
    pub momentum: GridImage,
    pub nll_initial: f64,
    pub nll_final: f64,
}

/// Sampler failure with the trace of every step completed before the error.
#[derive(Debug, Clone)]
pub struct SamplerFailure {
    pub error: Error,
    pub trace: Vec<StepTrace>,
}

impl core::fmt::Display for SamplerFailure {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{} (after {} completed steps)", self.error, self.trace.len())
    }
}

fn zeros_like(img: &GridImage) -> GridImage {
    GridImage::zeros(img.width(), img.height(), img.spacing_mm(), Units::Activity)
}

/// Clamp used for every likelihood evaluation point: the forward model is
/// only defined on nonnegative activity, and Nesterov lookaheads may dip
/// below zero.
fn clamped(img: &GridImage) -> Result<GridImage, Error> {
    img.map(Units::Activity, |v| v.max(0.0))
}

/// `m` Nesterov-accelerated gradient steps on the Poisson likelihood with
/// the scheduled PSF operator. With `mu = 0` this is plain projected
/// gradient descent; with `m = 0` the input passes through untouched.
#[allow(clippy::too_many_arguments)]
pub fn dc_refine(
    z_init: &GridImage,
    y: &Sinogram,
    cfg: &ScannerConfig,
    psf_mode: PsfMode,
    m: usize,
    eta: f64,
    mu: f64,
    nonneg: bool,
    momentum_in: Option<&GridImage>,
) -> Result<DcRefineOutput, Error> {
    let mut z = z_init.clone();
    let mut velocity = match momentum_in {
        Some(v) => v.clone(),
        None => zeros_like(z_init),
    };
    let nll_initial = poisson_nll(&clamped(&z)?, y, cfg, psf_mode, DEFAULT_EPSILON)?;
    for k in 0..m {
        // Lookahead point, evaluated on the physical (nonnegative) domain.
        let lookahead = GridImage::new(
            z.width(),
            z.height(),
            z.spacing_mm(),
            Units::Activity,
            z.data()
                .iter()
                .zip(velocity.data())
                .map(|(&zi, &vi)| (zi + mu * vi).max(0.0))
                .collect(),
        )?;
        let eval = poisson_nll_grad(&lookahead, y, cfg, psf_mode, DEFAULT_EPSILON)
            .map_err(|e| Error::Numerical(format!("dc iteration {k}: {e}")))?;
        let next_v: Vec<f64> = velocity
            .data()
            .iter()
            .zip(eval.grad.data())
            .map(|(&vi, &gi)| mu * vi - eta * gi)
            .collect();
        let next_z: Vec<f64> = z
            .data()
            .iter()
            .zip(&next_v)
            .map(|(&zi, &vi)| {
                let out = zi + vi;
                if nonneg {
                    out.max(0.0)
                } else {
                    out
                }
            })
            .collect();
        velocity = GridImage::new(z.width(), z.height(), z.spacing_mm(), Units::Activity, next_v)?;
        z = GridImage::new(z.width(), z.height(), z.spacing_mm(), Units::Activity, next_z)?;
    }
    let nll_final = poisson_nll(&clamped(&z)?, y, cfg, psf_mode, DEFAULT_EPSILON)?;
    Ok(DcRefineOutput { z, momentum: velocity, nll_initial, nll_final })
}

/// Full reconstruction: reverse DDIM loop with per-step data-consistency
/// refinement. The output activity is the refined estimate of the last
/// step; the initial model-space state is standard normal from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn ppcr_reconstruct(
    y: &Sinogram,
    cond: &GridImage,
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    scanner: &ScannerConfig,
    ppcr: &PpcrConfig,
    transform: &TransformParams,
    seed: u64,
) -> Result<(GridImage, SamplerState), Box<SamplerFailure>> {
    let mut trace: Vec<StepTrace> = Vec::with_capacity(ppcr.n_ddim_steps);
    macro_rules! fail {
        ($res:expr) => {
            match $res {
                Ok(v) => v,
                Err(e) => {
                    return Err(Box::new(SamplerFailure { error: e, trace }));
                }
            }
        };
    }

    let violations = ppcr.validate();
    if !violations.is_empty() {
        fail!(Err(Error::Config(format!("invalid sampler config: {}", violations[0]))));
    }
    let timesteps = fail!(ddim_timesteps(ppcr.n_ddim_steps, sched.n_train_steps));
    let n = cond.width();
    if cond.height() != n {
        fail!(Err(Error::Geometry(String::from("condition must be square"))));
    }

    let mut rng = SplitMix64::new(seed);
    let mut x_t = fail!(GridImage::new(
        n,
        n,
        cond.spacing_mm(),
        Units::ModelSpace,
        (0..n * n).map(|_| rng.next_gaussian()).collect(),
    ));

    let mut z_prev: Option<GridImage> = None;
    let mut momentum: Option<GridImage> = None;
    let mut z_out: Option<GridImage> = None;

    for (i, &t) in timesteps.iter().enumerate() {
        let step = i + 1;
        let psf_mode = psf_mode_for_step(step, ppcr);
        let m_t = inner_iters_for_step(step, ppcr);

        let eps_hat = fail!(denoiser.predict(&x_t, t, cond));
        let x0_hat = fail!(tweedie_estimate(&x_t, t, &eps_hat, sched));
        let z_tweedie = fail!(from_model_space_clamped(&x0_hat, transform));

        // Warm-start blend with the previous step's refined activity.
        let z0 = match (&z_prev, ppcr.alpha_warmstart) {
            (Some(prev), a) if a > 0.0 => fail!(GridImage::new(
                n,
                n,
                z_tweedie.spacing_mm(),
                Units::Activity,
                z_tweedie
                    .data()
                    .iter()
                    .zip(prev.data())
                    .map(|(&zt, &zp)| (1.0 - a) * zt + a * zp)
                    .collect(),
            )),
            _ => z_tweedie,
        };

        let refined = fail!(dc_refine(
            &z0,
            y,
            scanner,
            psf_mode,
            m_t,
            ppcr.eta_dc,
            ppcr.mu_nesterov,
            ppcr.nonneg_projection,
            momentum.as_ref(),
        )
        .map_err(|e| Error::Numerical(format!("step {step} (t={t}): {e}"))));

        trace.push(StepTrace {
            step,
            t_train: t,
            psf_mode,
            m_t,
            eta: ppcr.eta_dc,
            nll_before: refined.nll_initial,
            nll_after: refined.nll_final,
        });

        // Deterministic DDIM update with the refined estimate but the
        // original noise prediction for the direction term.
        let x0_refined = fail!(to_model_space(&fail!(clamped(&refined.z)), transform));
        let t_next = timesteps.get(i + 1).copied().unwrap_or(0);
        let abar_next = sched.alpha_bar(t_next);
        let (sa, sn) = (abar_next.sqrt(), (1.0 - abar_next).sqrt());
        x_t = fail!(GridImage::new(
            n,
            n,
            x_t.spacing_mm(),
            Units::ModelSpace,
            x0_refined
                .data()
                .iter()
                .zip(eps_hat.data())
                .map(|(&x0, &e)| sa * x0 + sn * e)
                .collect(),
        ));

        momentum = Some(refined.momentum.clone());
        z_prev = Some(refined.z.clone());
        z_out = Some(refined.z);
    }

    let z_final = z_out.expect("at least one sampler step");
    let state = SamplerState {
        step_index: ppcr.n_ddim_steps,
        x_t,
        z_prev_refined: z_prev,
        momentum,
        trace,
    };
    Ok((z_final, state))
}

/// Ablation variants of the sampler configuration (plus which denoiser the
/// variant uses).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Full,
    NoDc,
    NoPsf,
    NoPpcr,
    ConcatCond,
}

impl AblationVariant {
    pub fn parse(name: &str) -> Result<Self, Error> {
        match name {
            "full" => Ok(Self::Full),
            "no_dc" => Ok(Self::NoDc),
            "no_psf" => Ok(Self::NoPsf),
            "no_ppcr" => Ok(Self::NoPpcr),
            "concat_cond" => Ok(Self::ConcatCond),
            other => Err(Error::Config(format!("unknown ablation variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoDc => "no_dc",
            Self::NoPsf => "no_psf",
            Self::NoPpcr => "no_ppcr",
            Self::ConcatCond => "concat_cond",
        }
    }

    pub const ALL: [AblationVariant; 5] = [
        Self::Full,
        Self::NoDc,
        Self::NoPsf,
        Self::NoPpcr,
        Self::ConcatCond,
    ];

    /// Conditioning of the denoiser this variant reconstructs with.
    pub fn cond_mode(&self) -> CondMode {
        match self {
            Self::ConcatCond => CondMode::Concat,
            _ => CondMode::CrossAttention,
        }
    }

    /// Sampler configuration for the variant: `no_dc` disables refinement,
    /// `no_psf` keeps the identity PSF throughout, `no_ppcr` freezes the
    /// progressive schedules (constant `m_end` iterations, full PSF from
    /// step 1, no momentum, no warm-start).
    pub fn apply(&self, base: &PpcrConfig) -> PpcrConfig {
        let mut cfg = base.clone();
        match self {
            Self::Full | Self::ConcatCond => {}
            Self::NoDc => {
                cfg.m_start = 0;
                cfg.m_end = 0;
            }
            Self::NoPsf => {
                cfg.psf_on_from_step = cfg.n_ddim_steps + 1;
            }
            Self::NoPpcr => {
                cfg.m_start = cfg.m_end;
                cfg.psf_on_from_step = 1;
                cfg.mu_nesterov = 0.0;
                cfg.alpha_warmstart = 0.0;
            }
        }
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timesteps_spacing_for_protocol() {
        let ts = ddim_timesteps(50, 1000).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(ts[49], 20);
        for w in ts.windows(2) {
            assert_eq!(w[0] - w[1], 20);
        }
    }

    #[test]
    fn timesteps_identity_and_degenerate() {
        let ts = ddim_timesteps(10, 10).unwrap();
        assert_eq!(ts, (1..=10).rev().collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(1, 1000).unwrap(), alloc::vec![1000]);
        assert!(ddim_timesteps(0, 1000).is_err());
        assert!(ddim_timesteps(1001, 1000).is_err());
    }

    #[test]
    fn psf_schedule_protocol_switch() {
        let cfg = PpcrConfig::default();
        assert_eq!(psf_mode_for_step(35, &cfg), PsfMode::Identity);
        assert_eq!(psf_mode_for_step(36, &cfg), PsfMode::Full);
        assert_eq!(psf_mode_for_step(1, &cfg), PsfMode::Identity);
        assert_eq!(psf_mode_for_step(50, &cfg), PsfMode::Full);
    }

    #[test]
    fn psf_schedule_boundaries() {
        let disabled = PpcrConfig { psf_on_from_step: 51, ..PpcrConfig::default() };
        for step in 1..=50 {
            assert_eq!(psf_mode_for_step(step, &disabled), PsfMode::Identity);
        }
        let always = PpcrConfig { psf_on_from_step: 1, ..PpcrConfig::default() };
        for step in 1..=50 {
            assert_eq!(psf_mode_for_step(step, &always), PsfMode::Full);
        }
    }

    #[test]
    fn iteration_ramp_endpoints_and_midpoint() {
        let cfg = PpcrConfig::default();
        assert_eq!(inner_iters_for_step(1, &cfg), 2);
        assert_eq!(inner_iters_for_step(50, &cfg), 20);
        // round(2 + 18*24/49) = round(10.816) = 11.
        assert_eq!(inner_iters_for_step(25, &cfg), 11);
    }

    #[test]
    fn iteration_ramp_constant_cases() {
        let cfg = PpcrConfig { m_start: 7, m_end: 7, ..PpcrConfig::default() };
        for step in 1..=50 {
            assert_eq!(inner_iters_for_step(step, &cfg), 7);
        }
        let single = PpcrConfig { n_ddim_steps: 1, m_start: 2, m_end: 20, ..PpcrConfig::default() };
        assert_eq!(inner_iters_for_step(1, &single), 20);
    }

    #[test]
    fn ablation_variant_configs() {
        let base = PpcrConfig::default();
        let no_dc = AblationVariant::NoDc.apply(&base);
        assert_eq!((no_dc.m_start, no_dc.m_end), (0, 0));
        let no_psf = AblationVariant::NoPsf.apply(&base);
        assert_eq!(no_psf.psf_on_from_step, 51);
        let no_ppcr = AblationVariant::NoPpcr.apply(&base);
        assert_eq!(no_ppcr.m_start, no_ppcr.m_end);
        assert_eq!(no_ppcr.psf_on_from_step, 1);
        assert_eq!(no_ppcr.mu_nesterov, 0.0);
        assert_eq!(no_ppcr.alpha_warmstart, 0.0);
        // full vs no_ppcr differ only in the schedule fields.
        let full = AblationVariant::Full.apply(&base);
        assert_eq!(full, base);
        assert_eq!(no_ppcr.n_ddim_steps, full.n_ddim_steps);
        assert_eq!(no_ppcr.eta_dc, full.eta_dc);
        assert_eq!(no_ppcr.nonneg_projection, full.nonneg_projection);
        assert_eq!(AblationVariant::ConcatCond.apply(&base), base);
        assert_eq!(AblationVariant::ConcatCond.cond_mode(), CondMode::Concat);
        assert_eq!(AblationVariant::Full.cond_mode(), CondMode::CrossAttention);
        assert!(AblationVariant::parse("bogus").is_err());
    }
}
