use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt stream: {0}")]
    CorruptStream(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Format(_) | Error::CorruptStream(_) | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
            Error::MissingCheckpoint(_) => 2,
        }
    }
}
