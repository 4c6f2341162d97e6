use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    /// A caller broke an operation's precondition.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("length error: sequence of length {len} exceeds max_len {max}")]
    Length { len: usize, max: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("data error at line {line}: {msg}")]
    DataLine { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("training error: non-finite gradient for parameter `{param}`")]
    NonFinite { param: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Length { .. } => "length",
            Error::Data(_) | Error::DataLine { .. } => "data",
            Error::Format(_) => "format",
            Error::NonFinite { .. } => "training",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
