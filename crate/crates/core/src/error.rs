use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("time {t} is outside the admissible range [{lower}, {upper}]")]
    TimeOutOfRange { t: f64, lower: f64, upper: f64 },

    #[error("schedule kind mismatch: operation requires {expected}, schedule is {actual}")]
    KindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("degenerate density: {0}")]
    DegenerateDensity(String),

    #[error("unknown class `{0}`")]
    UnknownClass(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("time sequence must be strictly ascending (violated at index {index})")]
    NonAscendingTimes { index: usize },

    #[error("covariance matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("ratio-adaptive guidance requires the guidance ratio")]
    MissingRatio,

    #[error("guidance ratio supplied to a schedule that does not use it")]
    UnexpectedRatio,

    #[error("trajectory {trajectory} diverged at step {step} (t = {t})")]
    Diverged {
        trajectory: usize,
        step: usize,
        t: f64,
    },

    #[error("unsupported distribution: {0}")]
    UnsupportedDistribution(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
