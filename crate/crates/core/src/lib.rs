//! Desk-scale PET super-resolution engine.
//!
//! Reconstructs a high-resolution tracer activity map from low-quality
//! projection counts by combining an anatomy-conditioned diffusion prior with
//! scanner-aware Poisson data consistency. The crate is organised around the
//! inverse problem y ~ Poisson(A z + b):
//!
//! - [`phantom`] generates seeded synthetic activity/anatomy pairs with known
//!   lesion supports, standing in for clinical PET/CT data.
//! - [`forward`] (with [`psf`] and [`projector`]) implements the scanner
//!   operator A: Gaussian PSF, parallel-beam projection, angular/radial
//!   rebinning, dose scaling and a constant background, plus its exact
//!   adjoint, Poisson sampling and an MLEM comparator reconstruction.
//! - [`likelihood`] evaluates the Poisson negative log-likelihood and its
//!   analytic gradient in activity space.
//! - [`diffusion`], [`net`] and [`train`] carry the conditional score prior:
//!   arcsinh model-space transform, noise schedule, Tweedie estimation, an
//!   analytic Gaussian denoiser for verification and a small trainable
//!   anatomy-conditioned network.
//! - [`sampler`] runs the DDIM reverse loop with progressively scheduled
//!   physics constraints (PSF schedule, inner-iteration ramp, Nesterov
//!   momentum with warm-start).
//! - [`metrics`] computes PSNR/SSIM/NMSE and lesion-level uptake statistics.
//!
//! The crate is `no_std` + `alloc`; all randomness flows through the seeded
//! counter-based generator in [`rng`], so every operation is bit-reproducible
//! across runs and platforms. File formats, the CLI and concurrency live in
//! the companion `petsr-cli` crate.

#![no_std]

extern crate alloc;

pub mod config;
pub mod diffusion;
pub mod error;
pub mod forward;
pub mod grid;
pub mod likelihood;
pub mod metrics;
pub mod net;
pub mod phantom;
pub mod projector;
pub mod psf;
pub mod rng;
pub mod sampler;
pub mod train;

pub use config::{PpcrConfig, ScannerConfig, ScannerPreset, Violation};
pub use error::Error;
pub use grid::{GridImage, LesionMask, Sinogram, SinogramKind, Units};
pub use rng::SplitMix64;
