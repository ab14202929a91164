use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AqaError>;

/// Crate-wide error type. The CLI maps the variants onto distinct exit
/// codes: validation/config/parse failures, I/O failures, numeric failures.
#[derive(Debug, Error)]
pub enum AqaError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing id: {0}")]
    MissingId(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("image decode error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl AqaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AqaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        AqaError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// Exit-code class used by the CLI: 2 validation, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            AqaError::Validation(_)
            | AqaError::Config(_)
            | AqaError::Parse { .. }
            | AqaError::MissingId(_) => 2,
            AqaError::Io { .. } | AqaError::Image { .. } => 3,
            AqaError::Numeric(_) => 4,
        }
    }
}
