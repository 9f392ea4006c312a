//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration value; maps to exit code 2 in the CLI.
    #[error("config error: {0}")]
    Config(String),

    /// Data or invariant violation; maps to exit code 3 in the CLI.
    #[error("validation error: {0}")]
    Validation(String),

    /// A produced report failed a completeness or consistency guard;
    /// maps to exit code 4 in the CLI.
    #[error("acceptance guard: {0}")]
    Guard(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 validation/io, 4 guard.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Validation(_) | Error::Io { .. } => 3,
            Error::Guard(_) => 4,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn guard(msg: impl Into<String>) -> Self {
        Error::Guard(msg.into())
    }

    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
