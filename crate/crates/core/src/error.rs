use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("missing column \"{0}\"")]
    MissingColumn(String),
    #[error("non-numeric value {value:?} at row {row}, column \"{column}\"")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing value at row {row}, column \"{column}\"")]
    MissingValue { row: usize, column: String },
    #[error("constant column \"{0}\" cannot be normalized")]
    ConstantColumn(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite residual encountered")]
    NonFiniteResidual,
    #[error("sampler diverged at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },
    #[error("no posterior draws supplied")]
    EmptyDraws,
    #[error("need at least {needed} draws with defined importance, found {found}")]
    InsufficientDraws { needed: usize, found: usize },
    #[error("matrix needs at least two columns to compute a variance")]
    SingleColumn,
    #[error("kernel weights vanished for observation {0}")]
    ZeroKernelWeights(usize),
    #[error("regression smoother: covariate {0} is constant")]
    ConstantCovariate(usize),
    #[error("regression for exposure \"{0}\" is rank deficient")]
    RankDeficient(String),
    #[error("trimmed set is empty")]
    EmptyTrimmedSet,
    #[error("need at least two chains")]
    TooFewChains,
    #[error("chains must have equal length of at least {min}")]
    BadChainLength { min: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("draw file: {0}")]
    DrawFile(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
