use thiserror::Error;

/// Errors produced by the library.
///
/// The CLI maps these onto process exit codes with [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance of component {component} is not symmetric positive definite")]
    NotPositiveDefinite { component: usize },

    #[error("non-finite value at step {step} (input norm {input_norm:e})")]
    NonFinite { step: usize, input_norm: f64 },

    #[error("cannot normalize a zero-norm {what} at step {step}")]
    ZeroNorm { what: &'static str, step: usize },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// 1 for configuration/input problems, 2 for numeric failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::ZeroNorm { .. } | Error::Diverged { .. } => 2,
            _ => 1,
        }
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
