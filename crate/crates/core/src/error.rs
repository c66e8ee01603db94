use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("graph already consumed by a backward pass")]
    GraphConsumed,

    #[error("finite-difference oracle: {0}")]
    Oracle(String),

    #[error("catalog error: {0}")]
    Catalog(String),

    #[error("search space error: {0}")]
    SearchSpace(String),

    #[error("bridge error: {0}")]
    Bridge(String),

    #[error("build error: {0}")]
    Build(String),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("parse error in `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<Error> },

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn in_fold(self, fold: usize) -> Self {
        Self::Fold {
            fold,
            source: Box::new(self),
        }
    }

    /// The error underneath any fold annotations.
    pub fn root(&self) -> &Error {
        match self {
            Self::Fold { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_numeric_fault(&self) -> bool {
        match self {
            Self::NumericFault(_) => true,
            Self::Fold { source, .. } => source.is_numeric_fault(),
            _ => false,
        }
    }
}
