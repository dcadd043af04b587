//! Error taxonomy shared by the estimator crates.

use thiserror::Error;

/// Errors surfaced by configuration, data, and diagnostic entry points.
///
/// Contract violations inside the training hot path (shape mismatches between
/// a tape and its seed gradient, out-of-range indices) are programmer errors
/// and panic via `assert!` instead. Numerical divergence during a run is not
/// an error either: the run is marked unstable in its report and the caller
/// decides what to do with it.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of its documented range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An input violates a precondition (non-finite values, wrong dimension).
    #[error("invalid input: {0}")]
    Input(String),

    /// A mathematical precondition does not hold (non-PSD covariance,
    /// out-of-domain bound parameters).
    #[error("domain error: {0}")]
    Domain(String),

    /// Scenario files that fail to parse.
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
