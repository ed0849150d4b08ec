use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("coincident points {0} and {1}")]
    CoincidentPoints(usize, usize),
    #[error("solver did not converge: {0}")]
    NoConvergence(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("empty support")]
    EmptySupport,
    #[error("eigensolver failure: {0}")]
    Eigen(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
