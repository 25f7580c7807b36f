use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-contract input data.
    #[error("input error: {0}")]
    Input(String),
    /// Inconsistent configuration, weight shapes or missing weights.
    #[error("configuration error: {0}")]
    Config(String),
    /// Violated internal contract between pipeline stages.
    #[error("internal error: {0}")]
    Internal(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }

    /// Prefixes the message with the pipeline stage that produced it.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            Error::Input(m) => Error::Input(format!("[{stage}] {m}")),
            Error::Config(m) => Error::Config(format!("[{stage}] {m}")),
            Error::Internal(m) => Error::Internal(format!("[{stage}] {m}")),
            Error::Io(e) => Error::Io(std::io::Error::new(e.kind(), format!("[{stage}] {e}"))),
        }
    }

    /// Process exit code: 1 for input/IO problems, 2 for configuration errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
