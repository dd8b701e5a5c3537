use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("class {0} has no training samples")]
    EmptyClass(u32),

    #[error("dataset is empty: {0}")]
    EmptyDataset(String),

    #[error("invalid label: {0}")]
    Label(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("references: {0}")]
    References(String),

    #[error("class {class} has {count} embeddings, need at least 2 with nonzero spread")]
    InsufficientClass { class: u32, count: usize },

    #[error("empty set: {0}")]
    EmptySet(String),

    #[error("curve: {0}")]
    Curve(String),

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("patch is {height}x{width}, need at least {min}x{min}")]
    Size {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("generator profiles: {0}")]
    Profile(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable machine-readable category name.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dim { .. } => "dim",
            Error::Numeric(_) => "numeric",
            Error::EmptyClass(_) => "empty-class",
            Error::EmptyDataset(_) => "empty-dataset",
            Error::Label(_) => "label",
            Error::State(_) => "state",
            Error::Checkpoint(_) => "checkpoint",
            Error::References(_) => "references",
            Error::InsufficientClass { .. } => "insufficient-class",
            Error::EmptySet(_) => "empty-set",
            Error::Curve(_) => "curve",
            Error::Param(_) => "param",
            Error::Size { .. } => "size",
            Error::Profile(_) => "profile",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn dim(expected: usize, got: usize) -> Self {
        Error::Dim { expected, got }
    }
}
