//! Crate-wide error type with the exit-code mapping used by the CLI.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed file contents; `line` is 1-based, 0 when not line-oriented.
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    /// A domain invariant was violated (bad tree, bad bag, bad argument).
    #[error("{0}")]
    Invalid(String),

    /// Tensor shapes do not conform inside the expression tape.
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("config error: {0}")]
    Config(String),

    /// NaN or infinity surfaced where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Process exit code: 2 for data problems, 3 for numeric failures.
    /// Usage errors (exit 1) are handled by argument parsing in the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}
