use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input file. `context` names the file and record.
    #[error("format error in {context}: {message}")]
    Format { context: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The external detector broke its file contract.
    #[error("detector protocol error: {0}")]
    Protocol(String),

    #[error("detector failed: {message}\n--- stderr ---\n{stderr}")]
    Detector { message: String, stderr: String },

    #[error("detector timed out after {0:?}")]
    Timeout(std::time::Duration),

    /// A pipeline invariant was violated; indicates a bug upstream.
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Format {
            context: context.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code: 1 I/O, 2 format, 3 detector/protocol, 4 config.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 1,
            Error::Format { .. } => 2,
            Error::Protocol(_)
            | Error::Detector { .. }
            | Error::Timeout(_)
            | Error::Invariant(_)
            | Error::OracleUnavailable(_) => 3,
            Error::InvalidInput(_) | Error::Config(_) => 4,
        }
    }
}
