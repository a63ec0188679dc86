//! Error type shared by the library; variants map onto the CLI exit codes.

use thiserror::Error;

/// Library-level failure classification.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid configuration or incompatible specs (CLI exit code 2).
    #[error("config error: {0}")]
    Config(String),
    /// Missing, malformed, or inconsistent data files (CLI exit code 3).
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite losses or other numerical breakdown (CLI exit code 4).
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Underlying I/O failure (CLI exit code 3).
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// Shorthand constructor for configuration errors.
    pub fn config(msg: impl Into<String>) -> Self {
        CoreError::Config(msg.into())
    }

    /// Shorthand constructor for data errors.
    pub fn data(msg: impl Into<String>) -> Self {
        CoreError::Data(msg.into())
    }

    /// Shorthand constructor for numerical errors.
    pub fn numerical(msg: impl Into<String>) -> Self {
        CoreError::Numerical(msg.into())
    }
}
