use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model format error: {0}")]
    Format(String),

    #[error("validation error for tensor `{tensor}`: {reason}")]
    Validation { tensor: String, reason: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("missing weights for node `{node}` (tensor `{tensor}`)")]
    MissingTensor { node: String, tensor: String },

    #[error("weight blob truncated: need {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("image decode error: {0}")]
    Decode(String),

    #[error("unknown label `{label}` (valid labels: {valid})")]
    UnknownLabel { label: String, valid: String },

    #[error("missing classes: {0}")]
    MissingClasses(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("item `{id}`: {source}")]
    Item {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
