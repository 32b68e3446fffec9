//! Training loop for the noise-prediction network.
//!
//! Trains on clean high-resolution activity/anatomy pairs only: per step one
//! case and one timestep are drawn, Gaussian noise is injected in model
//! space and the network minimises the mean squared error of its noise
//! prediction, with Adam in single precision. Every draw comes from the
//! seeded splitmix stream, so identical configs produce bit-identical
//! weights. The condition is dropped (zeroed) for a configurable fraction of
//! steps.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::diffusion::{
    add_noise, fit_transform, make_schedule, to_model_space, Denoiser, NoiseSchedule,
    TransformParams,
};
use crate::error::Error;
use crate::grid::{GridImage, Units};
use crate::net::{ArchDescriptor, CondMode, TinyNet};
use crate::rng::SplitMix64;
use num_traits::Float;

/// One training case: clean activity and its co-registered anatomy.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub activity: GridImage,
    pub anatomy: GridImage,
}

/// Everything the trainer needs beyond the data.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub cond_mode: CondMode,
    pub base_channels: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Fraction of steps trained with the condition zeroed.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Loss log granularity (a `(step, loss)` row every this many steps).
    pub log_every: usize,
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub s_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            cond_mode: CondMode::CrossAttention,
            base_channels: 8,
            steps: 2000,
            learning_rate: 1e-3,
            cond_dropout: 0.1,
            seed: 7,
            log_every: 50,
            t_train: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            s_scale: 1.0,
        }
    }
}

/// Trained prior: parameters plus the transform and schedule they were
/// trained under. Serialises to the PSDW format in the companion crate.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyDenoiserWeights {
    pub arch: ArchDescriptor,
    pub params: Vec<f32>,
    pub transform: TransformParams,
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl TinyDenoiserWeights {
    pub fn schedule(&self) -> Result<NoiseSchedule, Error> {
        make_schedule(self.t_train, self.beta_min, self.beta_max)
    }
}

/// Training result: final weights and the loss log.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub weights: TinyDenoiserWeights,
    /// `(step, loss)` rows at `log_every` granularity (first and last step
    /// always included).
    pub loss_log: Vec<(usize, f64)>,
}

/// Divergence report carrying the last finite-loss checkpoint.
#[derive(Debug, Clone)]
pub struct TrainingFailure {
    pub step: usize,
    pub last_good: Option<TinyDenoiserWeights>,
    pub loss_log: Vec<(usize, f64)>,
}

impl core::fmt::Display for TrainingFailure {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "training diverged at step {}", self.step)
    }
}

/// Training error: either the inputs were unusable or the loss went
/// non-finite mid-run.
#[derive(Debug)]
pub enum TrainError {
    Setup(Error),
    Diverged(Box<TrainingFailure>),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Setup(e) => write!(f, "{e}"),
            TrainError::Diverged(d) => write!(f, "{d}"),
        }
    }
}

impl From<Error> for TrainError {
    fn from(e: Error) -> Self {
        TrainError::Setup(e)
    }
}

/// Normalises a condition image to unit max magnitude. Must match between
/// training and inference.
pub fn normalise_condition(c: &GridImage) -> Vec<f64> {
    let peak = c.data().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let scale = 1.0 / (peak + 1e-12);
    c.data().iter().map(|&v| v * scale).collect()
}

fn checkpoint(
    net: &TinyNet<f32>,
    transform: TransformParams,
    cfg: &TrainConfig,
) -> TinyDenoiserWeights {
    TinyDenoiserWeights {
        arch: net.arch,
        params: net.params.clone(),
        transform,
        t_train: cfg.t_train,
        beta_min: cfg.beta_min,
        beta_max: cfg.beta_max,
    }
}

/// Trains the noise predictor on the given cases. The model-space transform
/// is calibrated from the cases first and travels with the weights.
pub fn train_tiny_denoiser(
    cases: &[TrainingCase],
    cfg: &TrainConfig,
) -> Result<TrainOutput, TrainError> {
    if cases.is_empty() {
        return Err(Error::Config(String::from("no training cases")).into());
    }
    let n = cases[0].activity.width();
    for case in cases {
        if case.activity.width() != n
            || case.activity.height() != n
            || case.anatomy.width() != n
            || case.anatomy.height() != n
        {
            return Err(Error::Config(String::from(
                "all cases must share one square grid size",
            ))
            .into());
        }
    }

    let refs: Vec<&GridImage> = cases.iter().map(|c| &c.activity).collect();
    let transform = fit_transform(&refs, cfg.s_scale)?;
    let sched = make_schedule(cfg.t_train, cfg.beta_min, cfg.beta_max)?;

    // Precompute model-space images and normalised conditions as f32.
    let mut xs: Vec<Vec<f32>> = Vec::with_capacity(cases.len());
    let mut conds: Vec<Vec<f32>> = Vec::with_capacity(cases.len());
    for case in cases {
        let x = to_model_space(&case.activity, &transform)?;
        xs.push(x.data().iter().map(|&v| v as f32).collect());
        conds.push(normalise_condition(&case.anatomy).iter().map(|&v| v as f32).collect());
    }
    let zero_cond = vec![0.0f32; n * n];

    let arch = ArchDescriptor { cond_mode: cfg.cond_mode, base_channels: cfg.base_channels };
    let mut net = TinyNet::<f32>::init(arch, cfg.seed);
    let n_params = net.param_count();

    // Adam state.
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut m = vec![0.0f64; n_params];
    let mut v = vec![0.0f64; n_params];

    let mut rng = SplitMix64::new(cfg.seed ^ 0xA5A5_5A5A_1234_5678);
    let mut loss_log: Vec<(usize, f64)> = Vec::new();
    let mut last_good: Option<TinyDenoiserWeights> = None;
    let log_every = cfg.log_every.max(1);

    for step in 1..=cfg.steps {
        let case_idx = rng.below(cases.len() as u64) as usize;
        let t = 1 + rng.below(cfg.t_train as u64) as usize;
        let noise: Vec<f32> = (0..n * n).map(|_| rng.next_gaussian() as f32).collect();
        let drop_cond = rng.next_f64() < cfg.cond_dropout;

        let abar = sched.alpha_bar(t);
        let (sa, sn) = (abar.sqrt() as f32, (1.0 - abar).sqrt() as f32);
        let x_noisy: Vec<f32> = xs[case_idx]
            .iter()
            .zip(&noise)
            .map(|(&x0, &e)| sa * x0 + sn * e)
            .collect();
        let cond = if drop_cond { &zero_cond } else { &conds[case_idx] };

        let (loss, grads) = net.loss_and_grad(&x_noisy, cond, t, &noise, n)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged(Box::new(TrainingFailure {
                step,
                last_good,
                loss_log,
            })));
        }

        // Adam update in f64 on the f32 parameters.
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        for i in 0..n_params {
            let g = grads[i] as f64;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let update = cfg.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            net.params[i] = (net.params[i] as f64 - update) as f32;
        }

        if step == 1 || step == cfg.steps || step % log_every == 0 {
            loss_log.push((step, loss as f64));
            last_good = Some(checkpoint(&net, transform, cfg));
        }
    }

    Ok(TrainOutput { weights: checkpoint(&net, transform, cfg), loss_log })
}

/// Denoising MSE of a trained model at a fixed timestep over held-out
/// cases, against the zero-prediction baseline (predicting no noise at
/// all). Deterministic in `seed`.
pub fn validation_mse(
    weights: &TinyDenoiserWeights,
    cases: &[TrainingCase],
    t: usize,
    seed: u64,
) -> Result<(f64, f64), Error> {
    if cases.is_empty() {
        return Err(Error::Config(String::from("validation needs at least one case")));
    }
    let sched = weights.schedule()?;
    let net = TinyNet::<f32>::from_params(weights.arch, weights.params.clone())?;
    let mut rng = SplitMix64::new(seed);
    let mut model_sum = 0.0;
    let mut base_sum = 0.0;
    let mut count = 0usize;
    for case in cases {
        let n = case.activity.width();
        let x0 = to_model_space(&case.activity, &weights.transform)?;
        let noise = GridImage::new(
            n,
            n,
            case.activity.spacing_mm(),
            Units::ModelSpace,
            (0..n * n).map(|_| rng.next_gaussian()).collect(),
        )?;
        let x_t = add_noise(&x0, t, &sched, &noise)?;
        let cond: Vec<f32> = normalise_condition(&case.anatomy).iter().map(|&v| v as f32).collect();
        let x_t32: Vec<f32> = x_t.data().iter().map(|&v| v as f32).collect();
        let pred = net.forward(&x_t32, &cond, t, n)?;
        for i in 0..n * n {
            let e = noise.data()[i];
            let d = pred[i] as f64 - e;
            model_sum += d * d;
            base_sum += e * e;
        }
        count += n * n;
    }
    Ok((model_sum / count as f64, base_sum / count as f64))
}

/// Read-only denoiser over trained weights; safe for concurrent use.
pub struct TinyDenoiser {
    net: TinyNet<f32>,
}

impl TinyDenoiser {
    pub fn new(weights: &TinyDenoiserWeights) -> Result<Self, Error> {
        Ok(Self { net: TinyNet::from_params(weights.arch, weights.params.clone())? })
    }
}

impl Denoiser for TinyDenoiser {
    fn predict(&self, x_t: &GridImage, t: usize, cond: &GridImage) -> Result<GridImage, Error> {
        let n = x_t.width();
        if x_t.height() != n {
            return Err(Error::Geometry(String::from("network inputs must be square")));
        }
        if cond.width() != n || cond.height() != n {
            return Err(Error::Geometry(String::from("condition dims must match x_t")));
        }
        let x32: Vec<f32> = x_t.data().iter().map(|&v| v as f32).collect();
        let c32: Vec<f32> = normalise_condition(cond).iter().map(|&v| v as f32).collect();
        let out = self.net.forward(&x32, &c32, t, n)?;
        GridImage::new(
            n,
            n,
            x_t.spacing_mm(),
            Units::ModelSpace,
            out.iter().map(|&v| v as f64).collect(),
        )
    }
}
