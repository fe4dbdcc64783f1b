use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has zero norm")]
    ZeroRow(usize),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is empty or ragged: {0}")]
    Shape(String),
    #[error("system has {rows} rows and {cols} columns; need rows <= cols")]
    TooManyRows { rows: usize, cols: usize },
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid weight vector: {0}")]
    InvalidWeights(String),
    #[error("invalid step schedule: {0}")]
    InvalidSchedule(String),
    #[error("step size {0} outside (0, 2)")]
    StepOutOfRange(f64),
    #[error("rows of the system are not unit norm; call normalize_rows first")]
    NotNormalized,
    #[error("row index {z} out of range 1..={m}")]
    RowIndexOutOfRange { z: usize, m: usize },
    #[error("non-finite observation y = {0}")]
    NonFiniteObservation(f64),
    #[error("averaging was not enabled for this estimator")]
    AveragingDisabled,
    #[error("multi-index count or coefficient overflow: {0}")]
    Overflow(String),
    #[error("transition matrix is not ergodic: {0}")]
    NotErgodic(String),
    #[error("invalid transition matrix: {0}")]
    InvalidTransition(String),
    #[error("closed-form moments are only available for order 1 and 2, got {0}")]
    UnsupportedOrder(u32),
    #[error("invalid network model: {0}")]
    InvalidModel(String),
    #[error("strict noise mode: trace was generated with noise_sigma = {0}")]
    NoiseInStrictMode(f64),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
