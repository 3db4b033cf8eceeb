//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("graph already consumed by a backward pass")]
    GraphConsumed,

    #[error("loss is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("{path}: {kind}")]
    FileFormat { path: String, kind: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("round {round}, client {client}: {source}")]
    AtClient {
        round: usize,
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}, server: {source}")]
    AtServer {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }

    pub fn file(path: impl Into<String>, kind: impl Into<String>) -> Self {
        Error::FileFormat {
            path: path.into(),
            kind: kind.into(),
        }
    }

    pub fn at_client(self, round: usize, client: usize) -> Self {
        Error::AtClient {
            round,
            client,
            source: Box::new(self),
        }
    }

    pub fn at_server(self, round: usize) -> Self {
        Error::AtServer {
            round,
            source: Box::new(self),
        }
    }
}
