//! Speculative decoding with an evolving draft-side vocabulary.
//!
//! A draft model proposes tokens from a restricted active vocabulary (a
//! static frequency core plus a budget-bounded dynamic buffer) and a target
//! model verifies them losslessly. Two feedback paths keep the draft useful
//! under distribution shift:
//!
//! * **Vocabulary expansion** — when a verified token falls outside the
//!   active vocabulary, semantic neighbors (MIPS over the output-embedding
//!   rows via a norm-augmented HNSW index) and statistical neighbors (a
//!   pruned bigram co-occurrence graph) are retrieved asynchronously and
//!   admitted to an adaptive replacement cache.
//! * **Online alignment** — verified steps with draft/target divergence feed
//!   a replay buffer; when it fills, a curriculum-weighted temperature-scaled
//!   KL objective updates the draft's low-rank adapter.
//!
//! Everything runs on integer token streams with small linear-softmax models,
//! so every property (losslessness, cache policy, index recall, gradients)
//! is checkable against brute-force oracles. See [`selfcheck`] for those
//! oracles and [`harness`] for scenario generation and metrics.

pub mod alignment;
pub mod cache;
pub mod config;
pub mod engine;
pub mod harness;
pub mod models;
pub mod par;
pub mod retrieval;
pub mod selfcheck;
pub mod vocab;

use thiserror::Error;

/// Token identifier; dense integers in `[0, vocab_size)`.
pub type TokenId = u32;

#[derive(Debug, Error)]
pub enum Error {
    /// Caller-supplied data violated a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// An offline build step (vocab, graph, index, model) failed.
    #[error("build failed: {0}")]
    Build(String),
    /// A runtime invariant the system is supposed to maintain was violated.
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
