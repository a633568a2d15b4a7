use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("negative time t = {0}")]
    NegativeTime(f64),
    #[error("singular time t = {0}: sigma_t is zero")]
    SingularTime(f64),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("density has no closed-form diffused score")]
    NoAnalyticScore,
    #[error("sampler state left the finite box at step {step}")]
    NonFiniteState { step: usize },
    #[error("rejection sampler exhausted its budget of {budget} proposals")]
    RejectionBudgetExceeded { budget: usize },
    #[error("point lies outside the density support")]
    OutOfSupport,
    #[error("Newton iteration failed to converge for order {0}")]
    ConvergenceFailure(usize),
    #[error("point count {m} is not a positive multiple of block order {block}")]
    BadPointCount { m: usize, block: usize },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("dimension {0} is too large for tensor quadrature (max 3)")]
    DimensionTooLarge(usize),
    #[error("quadrature argument left the containment box: {0}")]
    ContainmentViolated(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("nothing to report")]
    EmptyReport,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Variant name, used for CLI exit messages and report status columns.
    pub fn name(&self) -> &'static str {
        match self {
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InvalidSize(_) => "InvalidSize",
            Error::NegativeTime(_) => "NegativeTime",
            Error::SingularTime(_) => "SingularTime",
            Error::EmptyDataset => "EmptyDataset",
            Error::NoAnalyticScore => "NoAnalyticScore",
            Error::NonFiniteState { .. } => "NonFiniteState",
            Error::RejectionBudgetExceeded { .. } => "RejectionBudgetExceeded",
            Error::OutOfSupport => "OutOfSupport",
            Error::ConvergenceFailure(_) => "ConvergenceFailure",
            Error::BadPointCount { .. } => "BadPointCount",
            Error::PreconditionViolated(_) => "PreconditionViolated",
            Error::DimensionTooLarge(_) => "DimensionTooLarge",
            Error::ContainmentViolated(_) => "ContainmentViolated",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Parse(_) => "Parse",
            Error::EmptyReport => "EmptyReport",
            Error::Io(_) => "IoError",
            Error::Csv(_) => "CsvError",
            Error::Json(_) => "JsonError",
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
