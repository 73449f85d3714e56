use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the episodic memory pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated an operation's shape or range contract.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A configuration value is out of range or inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input is numerically degenerate (e.g. a zero-norm vector).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A gradient entry was NaN or infinite when an optimizer step was requested.
    #[error("non-finite gradient in parameter `{name}` at flat index {index}")]
    NonFiniteGradient { name: String, index: usize },

    #[error("non-finite loss for batch element {batch_index}: mse={mse}, gd={gd}")]
    NonFiniteLoss { batch_index: usize, mse: f64, gd: f64 },

    /// Synthetic episode generation failed (an invalid motion program).
    #[error("generation error: {0}")]
    Generation(String),

    /// A persisted file was malformed, truncated, or from an unknown version.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// True for failures caused by the filesystem rather than by the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}
pub(crate) use contract;
