use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },

    #[error("flow vector {index} has a non-finite component")]
    NonFiniteFlow { index: usize },

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: network expects {expected} inputs, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("backward requires a scalar root, got shape {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },

    #[error("power iteration collapsed: ||Av|| = 0 at step {step}")]
    DegeneratePowerIteration { step: usize },

    #[error("optimization diverged at iteration {iteration}: loss is not finite")]
    Diverged { iteration: usize },

    #[error("pair solve {index} failed: {source}")]
    PairFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("time {time} is outside the fitted range [1, {frames}]")]
    TimeOutOfRange { time: f64, frames: usize },

    #[error("trajectory seeds disagree at point {index}")]
    SeedMismatch { index: usize },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
