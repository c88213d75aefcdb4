use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: parse error at line {line}, column {column}: {message}")]
    Parse {
        context: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}:{line}: {message}")]
    Embeddings {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid ontology: {0}")]
    Ontology(String),

    #[error("unknown ontology term {term:?} in dialogue {dialogue:?}")]
    UnknownTerm { dialogue: String, term: String },

    #[error("invalid corpus: {0}")]
    Corpus(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, err: &serde_json::Error) -> Self {
        Error::Parse {
            context: context.into(),
            line: err.line(),
            column: err.column(),
            message: err.to_string(),
        }
    }

    /// True for errors caused by bad inputs (as opposed to failures while running).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
