use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was outside its allowed range.
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    /// Shapes or dimensions of inputs do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input values violate a type invariant (non-finite, out of range, ...).
    #[error("invalid value: {0}")]
    Value(String),

    /// A metric was asked for on an input where it is not defined.
    #[error("undefined input: {0}")]
    Undefined(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at stage {stage}, epoch {epoch}: loss = {loss}")]
    Diverged { stage: &'static str, epoch: usize, loss: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter { name, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
