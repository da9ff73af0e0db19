//! Circuit analysis for a small decoder-only transformer.
//!
//! The crate trains a toy transformer on templated math-word-problem
//! validation, then locates the model components that carry the behavior:
//! edge attribution patching over a per-token computation graph, exact
//! activation patching as the oracle, faithfulness-banded circuit search,
//! soft intersection of per-template circuits, attention-head and
//! residual-stream interventions, and linear probes over the residual
//! stream.
//!
//! Batch work is data-parallel via rayon (feature `parallel`, on by
//! default) with a sequential fallback; results are identical in both
//! modes.

pub mod circuits;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod graph;
pub mod interventions;
pub mod model;
pub mod par;
pub mod patching;
pub mod probes;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
