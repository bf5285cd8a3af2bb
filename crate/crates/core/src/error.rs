use thiserror::Error;

/// Errors produced by the modelling, propagation, and solver layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value at stage {stage}: {what}")]
    NonFinite { stage: usize, what: String },

    #[error("finite-difference evaluation produced a non-finite value in column {column}")]
    NonFiniteColumn { column: usize },

    #[error("innovation covariance singular at stage {stage}")]
    SingularInnovation { stage: usize },

    #[error("jacobian failure at stage {stage}: {source}")]
    Jacobian {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
