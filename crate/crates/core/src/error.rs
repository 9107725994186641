use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("gaussian is not proper (some precision entry is <= 0)")]
    NotProper,

    #[error("operation not supported by {model} model: {op}")]
    Unsupported { model: &'static str, op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("inference diverged at epoch {epoch}")]
    InferenceDiverged { epoch: usize },

    #[error("tilted precision is not positive definite")]
    SingularTilted,

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("invalid config field `{field}`: {message}")]
    ConfigField { field: String, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
