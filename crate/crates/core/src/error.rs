use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
///
/// Variants are grouped by the kind of contract that was broken so that the
/// command-line layer can map them onto exit codes: everything except
/// [`Error::Training`] and [`Error::Io`] is an input/usage problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("tokenization error at position {position}: {message}")]
    Tokenization { position: usize, message: String },

    #[error("lookup error: unknown id `{0}`")]
    Lookup(String),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("oracle error at position {position}: {message}")]
    Oracle { position: usize, message: String },

    #[error("training error at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("report error: {0}")]
    Report(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures that happen while training or running a model, as
    /// opposed to bad inputs.
    pub fn is_runtime(&self) -> bool {
        matches!(self, Error::Training { .. })
    }
}
