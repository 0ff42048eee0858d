use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("validation error at row `{row}`: {message}")]
    Validation { row: String, message: String },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("duplicate point id `{0}`")]
    DuplicateId(String),

    #[error("sample size {requested} exceeds test set size {available}")]
    SampleSize { requested: usize, available: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("inconsistent search state: {0}")]
    Consistency(String),

    #[error("point `{0}` has already been queried")]
    AlreadyQueried(String),

    #[error("unknown point id `{0}`")]
    UnknownId(String),

    #[error("point `{got}` is not the pending query (pending: {expected:?})")]
    NotPending { expected: Option<String>, got: String },

    #[error("model fit unavailable: {0}")]
    FitUnavailable(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("SDR is undefined: queried confidences sum to zero expected misclassifications")]
    UndefinedSdr,

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
