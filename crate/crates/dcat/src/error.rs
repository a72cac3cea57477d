use std::fmt;
use std::path::Path;

use dcat_core::Error;

pub type AppResult<T> = Result<T, AppError>;

/// Failure class, which doubles as the process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Other = 1,
    Config = 2,
    Data = 3,
    Divergence = 4,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppError {
    pub kind: ErrorKind,
    pub message: String,
}

impl AppError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, message)
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Other, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind as i32
    }

    /// Prefixes the message with a file path.
    pub fn at(self, path: &Path) -> Self {
        Self {
            kind: self.kind,
            message: format!("{}: {}", path.display(), self.message),
        }
    }

    pub fn io(kind: ErrorKind, path: &Path, err: std::io::Error) -> Self {
        Self::new(kind, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for AppError {}

impl From<Error> for AppError {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::Config(_) => ErrorKind::Config,
            Error::Data(_) | Error::Label(_) => ErrorKind::Data,
            Error::Divergence { .. } | Error::NonFinite { .. } => ErrorKind::Divergence,
            _ => ErrorKind::Other,
        };
        Self::new(kind, e.to_string())
    }
}
