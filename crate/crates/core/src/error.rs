use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by calibration, quantization and file I/O.
#[derive(Debug, Error)]
pub enum TorqError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid scale {0}: scales must be finite and positive")]
    InvalidScale(f64),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The pair (i, j) does not straddle the equalization target.
    #[error("no variance transfer possible between blocks {i} and {j}")]
    NoTransferPossible { i: usize, j: usize },

    #[error("equalization did not converge after {steps} steps (spread {achieved_spread:e})")]
    Convergence { achieved_spread: f64, steps: usize },

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("unknown format '{0}' (expected mxfp4, mxint4 or nvfp4)")]
    UnknownFormat(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TorqError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = TorqError> = std::result::Result<T, E>;
