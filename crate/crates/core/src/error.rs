use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is missing, malformed or out of range.
    #[error("config error: {0}")]
    Config(String),

    /// A corpus file violates its schema. `line` is 1-based.
    #[error("{path}:{line}: {message}")]
    Record {
        path: String,
        line: usize,
        message: String,
    },

    /// Input data does not satisfy an operation's precondition.
    #[error("invalid data: {0}")]
    Data(String),

    /// Model construction, scoring or checkpoint problem.
    #[error("model error: {0}")]
    Model(String),

    /// Optimization diverged or otherwise could not continue.
    #[error("training aborted: {0}")]
    Training(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Model(_) => 1,
            Error::Record { .. } | Error::Data(_) | Error::Io { .. } | Error::Json(_) => 2,
            Error::Training(_) => 3,
        }
    }
}
