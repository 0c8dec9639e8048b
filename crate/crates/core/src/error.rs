use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, lengths or hyper-parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// A mathematical precondition was violated (e.g. log of a non-positive value).
    #[error("domain error: {0}")]
    Domain(String),

    /// An object was used in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    /// Malformed or inconsistent data, optionally pinned to a file and byte offset.
    #[error("data error in {}{}: {message}", file.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "<memory>".into()), offset.map(|o| format!(" at offset {o}")).unwrap_or_default())]
    Data {
        file: Option<PathBuf>,
        offset: Option<u64>,
        message: String,
    },

    /// A failure during training or evaluation, with a diagnostic.
    #[error("run error: {0}")]
    Run(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data {
            file: None,
            offset: None,
            message: msg.into(),
        }
    }

    pub fn data_at(file: impl Into<PathBuf>, offset: Option<u64>, msg: impl Into<String>) -> Self {
        Error::Data {
            file: Some(file.into()),
            offset,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
