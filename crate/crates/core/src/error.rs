use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum IclError {
    #[error("empty sample")]
    EmptySample,
    #[error("covariance not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("task family not uniformly invertible")]
    NotUniformlyInvertible,
    #[error("normalization undefined")]
    NormalizationUndefined,
    #[error("degenerate task second moment")]
    DegenerateTaskMoment,
    #[error("step size too large")]
    StepSizeTooLarge,
    #[error("no descent direction")]
    NoDescentDirection,
    #[error("coefficient not uniformly elliptic")]
    NotElliptic,
    #[error("singular linear system")]
    Singular,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, IclError>;
