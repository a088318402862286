use std::io;
use std::path::{Path, PathBuf};

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("unknown label `{0}`")]
    UnknownLabel(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("no ground truth for `{0}`")]
    MissingGroundTruth(String),

    #[error("annotation failed for `{id}`: {reason}")]
    Annotation { id: String, reason: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    InvalidInput,
    Io,
    Numeric,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidInput(_)
            | Error::ShapeMismatch(_)
            | Error::UnknownLabel(_)
            | Error::DuplicateId(_) => ErrorKind::InvalidInput,
            Error::Format { .. }
            | Error::MissingFile(_)
            | Error::MissingGroundTruth(_)
            | Error::Annotation { .. }
            | Error::Io { .. }
            | Error::Json(_) => ErrorKind::Io,
            Error::Numeric(_) => ErrorKind::Numeric,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
