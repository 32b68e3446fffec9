//! Flat `key = value` run configuration.
//!
//! One UTF-8 text file drives the whole pipeline: `#` starts a comment,
//! blank lines are ignored, keys are snake_case. Unknown keys are rejected;
//! `out_dir` is required; everything else falls back to the documented
//! default. Scanner preset fields (FWHM, dose, rebinning, target spacing)
//! come from the `--setting` flag, not the file.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use petsr_core::config::{PpcrConfig, ScannerConfig};
use petsr_core::net::CondMode;
use petsr_core::phantom::PhantomSpec;
use petsr_core::train::TrainConfig;

use crate::error::{CliError, Result};

/// Parsed run configuration with every pipeline knob resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    // Phantom dataset.
    pub grid_size: usize,
    pub spacing_mm: f64,
    pub n_organs: usize,
    pub n_lesions: usize,
    pub lesion_radius_mm: (f64, f64),
    pub lesion_contrast: (f64, f64),
    pub organ_activity: (f64, f64),
    pub lesion_in_anatomy: bool,
    pub case_count: usize,
    pub split: (f64, f64, f64),
    // Scanner geometry and calibration (preset-independent fields).
    pub n_angles_full: usize,
    pub n_radial_full: usize,
    pub count_scale: f64,
    // Sampler.
    pub n_ddim_steps: usize,
    pub psf_on_from_step: usize,
    pub m_start: usize,
    pub m_end: usize,
    pub eta_dc: f64,
    pub mu_nesterov: f64,
    pub alpha_warmstart: f64,
    pub nonneg_projection: bool,
    // Diffusion prior and training.
    pub t_train: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub s_scale: f64,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub cond_dropout: f64,
    pub log_every: usize,
    pub train_seed: u64,
    pub base_channels: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "out_dir",
    "seed",
    "workers",
    "grid_size",
    "spacing_mm",
    "n_organs",
    "n_lesions",
    "lesion_radius_mm_min",
    "lesion_radius_mm_max",
    "lesion_contrast_min",
    "lesion_contrast_max",
    "organ_activity_min",
    "organ_activity_max",
    "lesion_in_anatomy",
    "case_count",
    "split_train",
    "split_val",
    "split_test",
    "n_angles_full",
    "n_radial_full",
    "count_scale",
    "n_ddim_steps",
    "psf_on_from_step",
    "m_start",
    "m_end",
    "eta_dc",
    "mu_nesterov",
    "alpha_warmstart",
    "nonneg_projection",
    "t_train",
    "beta_min",
    "beta_max",
    "s_scale",
    "train_steps",
    "learning_rate",
    "cond_dropout",
    "log_every",
    "train_seed",
    "base_channels",
];

struct Raw {
    map: std::collections::BTreeMap<String, String>,
}

impl Raw {
    fn get_str(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(|s| s.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.map.get(key) {
            None => Ok(default),
            Some(v) => v.parse::<T>().map_err(|_| {
                CliError::Config(format!("key '{key}': cannot parse value '{v}'"))
            }),
        }
    }

    fn parse_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.map.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(CliError::Config(format!(
                "key '{key}': expected true or false, got '{v}'"
            ))),
        }
    }
}

fn parse_lines(text: &str) -> Result<Raw> {
    let mut map = std::collections::BTreeMap::new();
    let known: BTreeSet<&str> = KNOWN_KEYS.iter().copied().collect();
    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find('#') {
            Some(idx) => &raw_line[..idx],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                lineno + 1
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if !known.contains(key) {
            return Err(CliError::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(CliError::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
        }
    }
    Ok(Raw { map })
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_str_checked(&text)
    }

    pub fn from_str_checked(text: &str) -> Result<Self> {
        let raw = parse_lines(text)?;
        let out_dir = raw
            .get_str("out_dir")
            .ok_or_else(|| CliError::Config("required key 'out_dir' is missing".into()))?;
        let cfg = RunConfig {
            out_dir: PathBuf::from(out_dir),
            seed: raw.parse("seed", 42u64)?,
            workers: raw.parse("workers", 2usize)?,
            grid_size: raw.parse("grid_size", 128usize)?,
            spacing_mm: raw.parse("spacing_mm", 2.0f64)?,
            n_organs: raw.parse("n_organs", 4usize)?,
            n_lesions: raw.parse("n_lesions", 2usize)?,
            lesion_radius_mm: (
                raw.parse("lesion_radius_mm_min", 4.0f64)?,
                raw.parse("lesion_radius_mm_max", 9.0f64)?,
            ),
            lesion_contrast: (
                raw.parse("lesion_contrast_min", 1.6f64)?,
                raw.parse("lesion_contrast_max", 3.0f64)?,
            ),
            organ_activity: (
                raw.parse("organ_activity_min", 0.25f64)?,
                raw.parse("organ_activity_max", 1.0f64)?,
            ),
            lesion_in_anatomy: raw.parse_bool("lesion_in_anatomy", false)?,
            case_count: raw.parse("case_count", 50usize)?,
            split: (
                raw.parse("split_train", 0.8f64)?,
                raw.parse("split_val", 0.1f64)?,
                raw.parse("split_test", 0.1f64)?,
            ),
            n_angles_full: raw.parse("n_angles_full", 120usize)?,
            n_radial_full: raw.parse("n_radial_full", 128usize)?,
            count_scale: raw.parse("count_scale", 50.0f64)?,
            n_ddim_steps: raw.parse("n_ddim_steps", 50usize)?,
            psf_on_from_step: raw.parse("psf_on_from_step", 36usize)?,
            m_start: raw.parse("m_start", 2usize)?,
            m_end: raw.parse("m_end", 20usize)?,
            eta_dc: raw.parse("eta_dc", 0.05f64)?,
            mu_nesterov: raw.parse("mu_nesterov", 0.9f64)?,
            alpha_warmstart: raw.parse("alpha_warmstart", 0.3f64)?,
            nonneg_projection: raw.parse_bool("nonneg_projection", true)?,
            t_train: raw.parse("t_train", 1000usize)?,
            beta_min: raw.parse("beta_min", 1e-4f64)?,
            beta_max: raw.parse("beta_max", 0.02f64)?,
            s_scale: raw.parse("s_scale", 1.0f64)?,
            train_steps: raw.parse("train_steps", 2000usize)?,
            learning_rate: raw.parse("learning_rate", 1e-3f64)?,
            cond_dropout: raw.parse("cond_dropout", 0.1f64)?,
            log_every: raw.parse("log_every", 50usize)?,
            train_seed: raw.parse("train_seed", 7u64)?,
            base_channels: raw.parse("base_channels", 8usize)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let total = self.split.0 + self.split.1 + self.split.2;
        if (total - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!(
                "split fractions must sum to 1, got {total}"
            )));
        }
        let scanner = self.scanner_base();
        let violations = scanner.validate();
        if let Some(v) = violations.first() {
            return Err(CliError::Config(format!("scanner config: {v}")));
        }
        let ppcr = self.ppcr();
        if let Some(v) = ppcr.validate().first() {
            return Err(CliError::Config(format!("sampler config: {v}")));
        }
        self.phantom_base().validate().map_err(CliError::from)?;
        if self.grid_size % 4 != 0 {
            return Err(CliError::Config(
                "grid_size must be divisible by 4 (network downsampling)".into(),
            ));
        }
        Ok(())
    }

    /// Phantom spec before per-case seeding.
    pub fn phantom_base(&self) -> PhantomSpec {
        PhantomSpec {
            seed: self.seed,
            grid_size: self.grid_size,
            spacing_mm: self.spacing_mm,
            n_organs: self.n_organs,
            n_lesions: self.n_lesions,
            lesion_radius_mm: self.lesion_radius_mm,
            lesion_contrast: self.lesion_contrast,
            organ_activity: self.organ_activity,
            lesion_in_anatomy: self.lesion_in_anatomy,
        }
    }

    /// Scanner config before preset application and calibration.
    pub fn scanner_base(&self) -> ScannerConfig {
        ScannerConfig {
            image_size: self.grid_size,
            image_spacing_mm: self.spacing_mm,
            n_angles_full: self.n_angles_full,
            n_radial_full: self.n_radial_full,
            count_scale: self.count_scale,
            ..ScannerConfig::default()
        }
    }

    pub fn ppcr(&self) -> PpcrConfig {
        PpcrConfig {
            n_ddim_steps: self.n_ddim_steps,
            psf_on_from_step: self.psf_on_from_step,
            m_start: self.m_start,
            m_end: self.m_end,
            eta_dc: self.eta_dc,
            mu_nesterov: self.mu_nesterov,
            alpha_warmstart: self.alpha_warmstart,
            nonneg_projection: self.nonneg_projection,
        }
    }

    pub fn train_config(&self, cond_mode: CondMode) -> TrainConfig {
        TrainConfig {
            cond_mode,
            base_channels: self.base_channels,
            steps: self.train_steps,
            learning_rate: self.learning_rate,
            cond_dropout: self.cond_dropout,
            seed: self.train_seed,
            log_every: self.log_every,
            t_train: self.t_train,
            beta_min: self.beta_min,
            beta_max: self.beta_max,
            s_scale: self.s_scale,
        }
    }

    /// Split counts `(train, val, test)`; train and val round to nearest,
    /// test takes the remainder.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.case_count;
        let n_train = ((n as f64 * self.split.0) + 0.5).floor() as usize;
        let n_val = ((n as f64 * self.split.1) + 0.5).floor() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        (n_train, n_val, n - n_train - n_val)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::from_str_checked("out_dir = runs/x\n").unwrap();
        assert_eq!(cfg.grid_size, 128);
        assert_eq!(cfg.n_ddim_steps, 50);
        assert_eq!(cfg.psf_on_from_step, 36);
        assert_eq!(cfg.m_start, 2);
        assert_eq!(cfg.m_end, 20);
        assert_eq!(cfg.eta_dc, 0.05);
        assert_eq!(cfg.mu_nesterov, 0.9);
        assert_eq!(cfg.alpha_warmstart, 0.3);
        assert_eq!(cfg.split_counts(), (40, 5, 5));
    }

    #[test]
    fn comments_and_blank_lines() {
        let text = "\n# a comment\nout_dir = runs/y  # trailing\n\nseed = 9\n";
        let cfg = RunConfig::from_str_checked(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.out_dir, PathBuf::from("runs/y"));
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_str_checked("out_dir = x\nbogus_key = 3\n").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("bogus_key"));
    }

    #[test]
    fn missing_out_dir_rejected() {
        let err = RunConfig::from_str_checked("seed = 1\n").unwrap_err();
        assert!(err.to_string().contains("out_dir"));
    }

    #[test]
    fn duplicate_key_rejected() {
        assert!(RunConfig::from_str_checked("out_dir = a\nout_dir = b\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_str_checked("out_dir = a\nseed = soon\n").is_err());
        assert!(RunConfig::from_str_checked("out_dir = a\nsplit_train = 0.9\n").is_err());
        assert!(RunConfig::from_str_checked("out_dir = a\nn_organs = 9\n").is_err());
        assert!(RunConfig::from_str_checked("out_dir = a\nm_start = 30\n").is_err());
    }

    #[test]
    fn split_counts_examples() {
        let cfg = RunConfig::from_str_checked(
            "out_dir = a\ncase_count = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.split_counts(), (8, 1, 1));
        let cfg = RunConfig::from_str_checked(
            "out_dir = a\ncase_count = 0\n",
        )
        .unwrap();
        assert_eq!(cfg.split_counts(), (0, 0, 0));
        let cfg = RunConfig::from_str_checked(
            "out_dir = a\ncase_count = 50\nsplit_train = 0.6\nsplit_val = 0.2\nsplit_test = 0.2\n",
        )
        .unwrap();
        assert_eq!(cfg.split_counts(), (30, 10, 10));
    }
}
