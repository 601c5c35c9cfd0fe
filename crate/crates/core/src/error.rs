//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Exit code contract for the CLI: 1 for configuration problems,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config { .. } | Error::UnknownScheme(_) => 1,
            _ => 2,
        }
    }
}
