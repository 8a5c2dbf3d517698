use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlnError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("degenerate importance sample: every raw weight is zero")]
    DegenerateSample,
    #[error("Newton solve for species {species} did not converge: {reason}")]
    NonConvergence { species: usize, reason: String },
    #[error("covariate matrix is rank deficient; dependent columns: {columns:?}")]
    RankDeficient { columns: Vec<usize> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, PlnError>;
