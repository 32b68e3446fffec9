//! Error type shared by all engine modules.

use alloc::string::String;

/// Engine error. Variants map onto the failure classes the operations
/// document: invalid construction, geometry mismatches, domain violations,
/// numerical failures and generation/configuration problems.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A type invariant would be violated (bad lengths, non-finite values).
    Invalid(String),
    /// Dimensions or divisibility constraints between operands do not hold.
    Geometry(String),
    /// An input lies outside an operation's mathematical domain.
    Domain(String),
    /// A computation produced a non-finite or out-of-range value.
    Numerical(String),
    /// Phantom generation could not satisfy its constraints.
    Generation(String),
    /// An unknown preset, variant or configuration value.
    Config(String),
}

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::Invalid(m) => write!(f, "invalid value: {m}"),
            Error::Geometry(m) => write!(f, "geometry mismatch: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Numerical(m) => write!(f, "numerical failure: {m}"),
            Error::Generation(m) => write!(f, "generation failed: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
        }
    }
}

impl core::error::Error for Error {}
