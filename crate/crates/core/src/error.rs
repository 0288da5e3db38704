use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported QAM order {0}; expected one of 4, 16, 64")]
    UnsupportedQamOrder(usize),

    #[error("invalid dimensions: {0}")]
    Dimension(String),

    #[error("variances must be strictly positive (got {0}, {1})")]
    NonPositiveVariance(f64, f64),

    #[error("system matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("column {0} of the channel matrix has zero norm")]
    ZeroColumn(usize),

    #[error("enumeration needs {required} candidates, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },

    #[error("label {0} is not a constellation point")]
    LabelNotInConstellation(f64),

    #[error("need at least 2 realizations, got {0}")]
    TooFewRealizations(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no forward tape recorded")]
    MissingTape,

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("dimension mismatch for {what}: found {found}, expected {expected}")]
    DimensionMismatch {
        what: String,
        found: usize,
        expected: usize,
    },

    #[error("checkpoint: truncated while reading {0}")]
    Truncated(String),

    #[error("checkpoint: {0}")]
    Malformed(String),

    #[error("training diverged at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("unknown detector `{0}`")]
    UnknownDetector(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
