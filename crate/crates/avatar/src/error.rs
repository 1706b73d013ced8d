//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape of an input does not match what the model or operation expects.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// A forward pass produced a non-finite value.
    #[error("non-finite value in row {row} of {what}")]
    NonFinite { what: &'static str, row: usize },

    /// An input is degenerate for the requested operation (e.g. all class
    /// probabilities zero).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// No probability mass is available to place a centroid for this class.
    #[error("class {class} has no probability mass to derive a centroid from")]
    DegenerateClass { class: usize },

    /// An argument violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The training loss became non-finite.
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// Downsampling removed every sample of a class.
    #[error("downsampling emptied class {class} ({domain})")]
    ClassEmptied { class: usize, domain: &'static str },

    /// A dataset manifest or feature file is malformed.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A configuration file or value is invalid.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
