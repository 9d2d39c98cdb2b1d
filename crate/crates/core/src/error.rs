//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Which factor of a block-exchangeable matrix failed the nonsingularity check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockFactor {
    /// The diagonal block `A`.
    Diagonal,
    /// `A - B`.
    DiagonalMinusOffDiagonal,
    /// `A + (P - 1) B`.
    DiagonalPlusOffDiagonals,
}

impl std::fmt::Display for BlockFactor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockFactor::Diagonal => write!(f, "A"),
            BlockFactor::DiagonalMinusOffDiagonal => write!(f, "A - B"),
            BlockFactor::DiagonalPlusOffDiagonals => write!(f, "A + (P-1)B"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("subject {subject}: {message}")]
    InvalidSubject { subject: String, message: String },

    #[error("timepoint {time} is never observed in period {period}; timepoint sets differ across periods")]
    InconsistentTimepoints { time: f64, period: usize },

    #[error("matrix shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    Asymmetric { asymmetry: f64 },

    #[error("block factor {factor} is singular (reciprocal condition {rcond:e})")]
    SingularBlock { factor: BlockFactor, rcond: f64 },

    #[error("design matrix is rank deficient; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("not enough observations: {observations} for {parameters} parameters")]
    TooFewObservations { observations: usize, parameters: usize },

    #[error("weighted least squares did not converge after {iterations} iterations (last step {last_step:e})")]
    NotConverged {
        iterations: usize,
        last_step: f64,
        beta: Vec<f64>,
    },

    #[error("matrix is singular: {0}")]
    Singular(String),

    #[error("covariance matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },

    #[error("contrast of placebo with itself is undefined")]
    PlaceboContrast,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{failed} of {total} replicates failed, above the 1% tolerance")]
    TooManyFailures { failed: usize, total: usize },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
