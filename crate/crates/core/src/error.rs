//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tensor id {0} not recorded on this tape")]
    UnknownTensor(usize),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown word '{0}'")]
    UnknownWord(String),

    #[error("unknown node or edge: {0}")]
    UnknownEdge(String),

    #[error("invalid intervention: {0}")]
    InvalidIntervention(String),

    #[error("dataset generation failed: {0}")]
    Dataset(String),

    #[error("position label {0} not present in this template")]
    UnknownLabel(String),

    #[error("training diverged (non-finite loss) at step {step}")]
    Divergence { step: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("circuit fingerprint {circuit} does not match model {model}")]
    ForeignCircuit { circuit: String, model: String },

    #[error("degenerate pair at index {index}: full-model logit difference below 1e-9")]
    DegeneratePair { index: usize },

    #[error("circuit error: {0}")]
    Circuit(String),

    #[error("probe error: {0}")]
    Probe(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}
