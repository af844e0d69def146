use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot:e} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min:e}, max {max:e})")]
    NotPsd { min: f64, max: f64 },
    #[error("matrix is numerically singular (eigenvalue {value:e} vs max {max:e})")]
    Singular { value: f64, max: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("{path}: line {line}: cannot parse {token:?} as a number")]
    Parse {
        path: PathBuf,
        line: usize,
        token: String,
    },
    #[error("{path}: line {line}: label {value} is not one of 0, 1, -1, +1")]
    Label {
        path: PathBuf,
        line: usize,
        value: f64,
    },
    #[error("dataset {0} contains no examples")]
    EmptyDataset(PathBuf),
    #[error("minibatch size {batch} is invalid for a dataset of {n} examples")]
    BadBatchSize { batch: usize, n: usize },

    #[error("estimator {estimator} is not available for the {term} term")]
    EstimatorUnavailable {
        term: &'static str,
        estimator: &'static str,
    },
    #[error("unknown control variate {0:?}; valid identifiers are c1..c7, score and subsets none, S4, S5, S6, S7")]
    UnknownCv(String),
    #[error("control variate {0} listed more than once")]
    DuplicateCv(String),

    #[error("moment matrix is singular or ill-conditioned (condition number {condition:e})")]
    SingularMoments { condition: f64 },
    #[error("decay factor gamma = {0} is outside the allowed range")]
    BadGamma(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
