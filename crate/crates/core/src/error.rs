use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the pipeline can report.
///
/// Variants are grouped by who has to fix them: the user (config), the data
/// (files on disk), or the numerics. [`Error::category`] exposes that grouping
/// for exit-code mapping.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("no snapshot files in {0}")]
    NoSnapshots(PathBuf),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error("missing tensor `{0}` in archive")]
    MissingTensor(String),

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("stage order: {0}")]
    StageOrder(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, used by the CLI for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    User,
    Data,
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::MissingArtifact(_)
            | Error::StageOrder(_) => ErrorCategory::User,
            Error::Numerical(_) => ErrorCategory::Numerical,
            Error::Shape(_)
            | Error::Data { .. }
            | Error::Parse { .. }
            | Error::NoSnapshots(_)
            | Error::Archive(_)
            | Error::MissingTensor(_)
            | Error::TensorShape { .. }
            | Error::Io { .. } => ErrorCategory::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
