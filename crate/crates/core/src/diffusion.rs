//! Conditional score prior: model-space transform, noise schedule, Tweedie
//! estimation and the denoiser interface.
//!
//! Activity maps are mapped into model space with `x = asinh(z/s)/kappa`,
//! which compresses the high dynamic range of hot uptake while staying
//! near-linear around zero. The forward noising process is the usual
//! variance-preserving chain `x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps`;
//! Tweedie's formula inverts a noise prediction into a clean estimate.
//! Besides the trainable network (see [`crate::net`]) an analytic Gaussian
//! denoiser provides exact posterior means for verifying the sampler.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::grid::{GridImage, Units};
use num_traits::Float;

/// Parameters of the arcsinh model-space transform `x = asinh(z/s)/kappa`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformParams {
    pub s_scale: f64,
    pub kappa: f64,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self { s_scale: 1.0, kappa: 1.0 }
    }
}

impl TransformParams {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.s_scale > 0.0) || !(self.kappa > 0.0) {
            return Err(Error::Config(format!(
                "transform parameters must be positive (s={}, kappa={})",
                self.s_scale, self.kappa
            )));
        }
        Ok(())
    }
}

/// Elementwise `x = asinh(z/s)/kappa`.
pub fn to_model_space(z: &GridImage, p: &TransformParams) -> Result<GridImage, Error> {
    p.validate()?;
    z.map(Units::ModelSpace, |v| (v / p.s_scale).asinh() / p.kappa)
}

/// Inverse transform `z = s * sinh(kappa * x)`, clamped at zero for use as
/// activity. Overflows for |kappa*x| > 700.
pub fn from_model_space(x: &GridImage, p: &TransformParams) -> Result<GridImage, Error> {
    p.validate()?;
    let limit = 700.0;
    for &v in x.data() {
        if (p.kappa * v).abs() > limit {
            return Err(Error::Numerical(format!(
                "sinh overflow: |kappa*x| = {} > {limit}",
                (p.kappa * v).abs()
            )));
        }
    }
    x.map(Units::Activity, |v| p.s_scale * (p.kappa * v).sinh())
}

/// [`from_model_space`] followed by clamping at zero (activity is physical).
pub fn from_model_space_clamped(x: &GridImage, p: &TransformParams) -> Result<GridImage, Error> {
    let z = from_model_space(x, p)?;
    z.map(Units::Activity, |v| v.max(0.0))
}

/// Calibrates kappa so the 99.5th percentile of `asinh(z/s)` over the given
/// activity maps lands at 1.0 in model space.
pub fn fit_transform(activities: &[&GridImage], s_scale: f64) -> Result<TransformParams, Error> {
    if activities.is_empty() {
        return Err(Error::Config(String::from("transform fit needs at least one image")));
    }
    let mut values: Vec<f64> = activities
        .iter()
        .flat_map(|img| img.data().iter().map(|&v| (v / s_scale).asinh()))
        .collect();
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    // Nearest-rank percentile.
    let rank = ((0.995 * values.len() as f64).ceil() as usize).clamp(1, values.len());
    let q = values[rank - 1];
    let kappa = if q > 1e-12 { q } else { 1.0 };
    Ok(TransformParams { s_scale, kappa })
}

/// Variance-preserving noise schedule with linear betas.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub n_train_steps: usize,
    pub betas: Vec<f64>,
    /// `abar[t-1]` is the cumulative product for timestep t in 1..=T.
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Cumulative product at training timestep `t` (1-based); `t = 0` is the
    /// clean image, with `abar = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }
}

/// Linear beta schedule from `beta_min` to `beta_max` over `t_steps`.
pub fn make_schedule(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule, Error> {
    if t_steps == 0 {
        return Err(Error::Config(String::from("schedule needs at least one step")));
    }
    if !(beta_min > 0.0) || beta_max < beta_min || beta_max >= 1.0 {
        return Err(Error::Config(format!(
            "betas must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
        )));
    }
    let mut betas = Vec::with_capacity(t_steps);
    for i in 0..t_steps {
        let frac = if t_steps == 1 { 0.0 } else { i as f64 / (t_steps - 1) as f64 };
        betas.push(beta_min + (beta_max - beta_min) * frac);
    }
    let mut alpha_bars = Vec::with_capacity(t_steps);
    let mut prod = 1.0;
    for &b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { n_train_steps: t_steps, betas, alpha_bars })
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn add_noise(
    x0: &GridImage,
    t: usize,
    sched: &NoiseSchedule,
    noise: &GridImage,
) -> Result<GridImage, Error> {
    if x0.len() != noise.len() {
        return Err(Error::Geometry(String::from("noise dims must match image dims")));
    }
    let abar = sched.alpha_bar(t);
    let (sa, sn) = (abar.sqrt(), (1.0 - abar).sqrt());
    GridImage::new(
        x0.width(),
        x0.height(),
        x0.spacing_mm(),
        Units::ModelSpace,
        x0.data()
            .iter()
            .zip(noise.data())
            .map(|(&x, &n)| sa * x + sn * n)
            .collect(),
    )
}

/// Tweedie estimate `x0_hat = (x_t - sqrt(1-abar_t) eps_hat) / sqrt(abar_t)`.
pub fn tweedie_estimate(
    x_t: &GridImage,
    t: usize,
    eps_hat: &GridImage,
    sched: &NoiseSchedule,
) -> Result<GridImage, Error> {
    if x_t.len() != eps_hat.len() {
        return Err(Error::Geometry(String::from("eps_hat dims must match x_t dims")));
    }
    let abar = sched.alpha_bar(t);
    if !(abar > 0.0) {
        return Err(Error::Numerical(format!("alpha_bar({t}) is not positive")));
    }
    let (sa, sn) = (abar.sqrt(), (1.0 - abar).sqrt());
    GridImage::new(
        x_t.width(),
        x_t.height(),
        x_t.spacing_mm(),
        Units::ModelSpace,
        x_t.data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&x, &e)| (x - sn * e) / sa)
            .collect(),
    )
}

/// Noise predictor interface: `eps_hat = predict(x_t, t, c)`.
pub trait Denoiser {
    fn predict(&self, x_t: &GridImage, t: usize, cond: &GridImage) -> Result<GridImage, Error>;
}

/// Exact optimal noise predictor for the prior `x0 ~ N(mean, tau^2 I)`.
///
/// Under that prior the posterior mean given `x_t` is available in closed
/// form per pixel, and the corresponding noise prediction follows from
/// inverting Tweedie's formula. Used to verify the sampler against scalar
/// recursions.
pub struct GaussianAnalyticDenoiser {
    mean: GridImage,
    tau: f64,
    sched: NoiseSchedule,
}

impl GaussianAnalyticDenoiser {
    pub fn new(mean: GridImage, tau: f64, sched: NoiseSchedule) -> Result<Self, Error> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { mean, tau, sched })
    }

    /// Closed-form posterior mean of x0 given x_t for one pixel.
    pub fn posterior_mean(&self, x_t: f64, mean: f64, t: usize) -> f64 {
        let abar = self.sched.alpha_bar(t);
        let tau2 = self.tau * self.tau;
        // Prior N(mean, tau^2), likelihood x_t ~ N(sqrt(abar) x0, 1-abar).
        (mean * (1.0 - abar) + abar.sqrt() * tau2 * x_t) / ((1.0 - abar) + abar * tau2)
    }
}

impl Denoiser for GaussianAnalyticDenoiser {
    fn predict(&self, x_t: &GridImage, t: usize, _cond: &GridImage) -> Result<GridImage, Error> {
        if x_t.len() != self.mean.len() {
            return Err(Error::Geometry(String::from("x_t dims must match prior mean dims")));
        }
        let abar = self.sched.alpha_bar(t);
        let (sa, sn) = (abar.sqrt(), (1.0 - abar).sqrt().max(1e-300));
        GridImage::new(
            x_t.width(),
            x_t.height(),
            x_t.spacing_mm(),
            Units::ModelSpace,
            x_t.data()
                .iter()
                .zip(self.mean.data())
                .map(|(&x, &m)| {
                    let mu = self.posterior_mean(x, m, t);
                    (x - sa * mu) / sn
                })
                .collect(),
        )
    }
}
