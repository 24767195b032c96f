use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller supplied an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Configuration is inconsistent or incompatible.
    #[error("config error: {0}")]
    Config(String),

    /// A value went non-finite or a numeric precondition failed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Shape mismatch between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A binary or text file did not match its declared format.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Json(_) => 2,
            Error::Format { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Argument(_) | Error::Shape(_) | Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
