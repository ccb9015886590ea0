use thiserror::Error;

/// Errors raised across the fact-linking pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },

    #[error("line {line}: fact references unknown id {id:?}")]
    DanglingFactReference { line: usize, id: String },

    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("unknown id {0:?}")]
    UnknownId(String),

    #[error("reserved marker {marker} found in input text {text:?}")]
    ReservedMarker { marker: &'static str, text: String },

    #[error("triple has no provenance sentence but context was requested")]
    MissingContext,

    #[error("no stored vector for key {0:?}")]
    MissingVector(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("attention key set is empty")]
    EmptyKeySet,

    #[error("{predictions} predictions for {gold} gold facts")]
    LengthMismatch { predictions: usize, gold: usize },

    #[error("nothing to evaluate")]
    EmptyEvaluation,

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
