use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("incompatible: {0}")]
    Incompatible(String),
    #[error("non-finite gradient in parameter {param}: {detail}")]
    NonFinite { param: String, detail: String },
    #[error("check failed: {0}")]
    CheckFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn parse(path: impl Into<String>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput(_) | Error::Io { .. } => 2,
            Error::Parse { .. } | Error::Format { .. } | Error::Config(_) | Error::Alignment(_) => 3,
            Error::Incompatible(_) => 4,
            Error::Tensor(TensorError::Config(_)) => 3,
            Error::Tensor(_) | Error::NonFinite { .. } | Error::CheckFailed(_) => 1,
        }
    }
}
