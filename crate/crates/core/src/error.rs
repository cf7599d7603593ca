//! Crate-wide error type.
//!
//! Errors are grouped by how a caller should react: bad configuration,
//! bad input data, or a numerical failure at run time. The CLI maps these
//! groups onto distinct process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad shapes, out-of-range hyperparameters,
    /// unknown presets or config keys.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid or missing input data: malformed trajectories, broken
    /// dataset containers, shape mismatches between data and model.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: non-finite values, divergence, degenerate scales.
    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code used by the command-line front end.
    /// 0 = success, 2 = config error, 3 = data error, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
