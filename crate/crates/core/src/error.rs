use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum EkiError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: String, message: String },
    #[error("Cholesky factorization failed for {0}")]
    Cholesky(&'static str),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("operator restricted to the ensemble span is singular (smallest singular value {0:e})")]
    SingularRestriction(f64),
    #[error("rate fit needs at least 3 points in the window, found {0}")]
    TooFewPoints(usize),
    #[error("rate fit requires positive values, found {0:e} at t = {1}")]
    NonPositiveValue(f64, f64),
    #[error("numerical abort in path {path} at step {step}: {snapshot}")]
    NumericalAbort { path: usize, step: usize, snapshot: String },
    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EkiError>;

pub(crate) fn invalid(name: &str, message: impl Into<String>) -> EkiError {
    EkiError::InvalidParameter {
        name: name.to_string(),
        message: message.into(),
    }
}
