//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HadolaError {
    /// A confidence token outside {yes, maybe, no}. Never silently coerced.
    #[error("unknown confidence label `{0}` (expected yes, maybe or no)")]
    UnknownConfidence(String),

    /// The queried answer was given by no annotator of the sample.
    #[error("answer `{answer}` was given by no annotator of sample `{id}`")]
    NoSuchAnswer { id: String, answer: String },

    /// Two distributions that should share an aligned support do not.
    #[error("support mismatch: {0}")]
    SupportMismatch(String),

    #[error("temperature must be a positive finite number, got {0}")]
    InvalidTemperature(f64),

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionError { expected: usize, got: usize },

    #[error("vocabulary error: {0}")]
    VocabError(String),

    /// Training produced a non-finite loss. `round` is set when the failure
    /// happened inside a pipeline round.
    #[error("training diverged at epoch {epoch} (round {}): loss = {loss}", round.map_or_else(|| "bootstrap".to_string(), |r| r.to_string()))]
    Diverged {
        epoch: usize,
        round: Option<usize>,
        loss: f64,
    },

    /// The seed set is missing a stratum required for threshold estimation.
    #[error("seed stratum error: {0}")]
    SeedStratumError(String),

    #[error("invalid configuration: {0}")]
    ConfigError(String),

    /// A dataset record violating the sample invariants.
    #[error("invalid sample `{id}`: {reason}")]
    InvalidSample { id: String, reason: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HadolaError>;
