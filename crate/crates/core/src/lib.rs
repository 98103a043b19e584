//! Coherence-aware text segmentation with a two-level Transformer.
//!
//! Sentences are encoded from their tokens by a token-level encoder, then
//! contextualized by a sentence-level encoder that also produces a snippet
//! encoding. A per-sentence classifier predicts segment boundaries; an
//! optional coherence regressor is trained to score real snippets above
//! shuffled ones.

pub mod data;
pub mod embeddings;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
