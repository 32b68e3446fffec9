//! CLI-side error type with stable exit codes.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

/// Exit codes: 0 success, 2 invalid configuration, 3 I/O or file-format
/// failure, 4 numerical failure (training divergence, sampler failure).
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, message: &str) -> Self {
        CliError::Format { path: path.to_path_buf(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<petsr_core::Error> for CliError {
    fn from(e: petsr_core::Error) -> Self {
        match e {
            petsr_core::Error::Config(m) => CliError::Config(m.to_string()),
            other => CliError::Numerical(other.to_string()),
        }
    }
}
