//! Embedding training by local aggregation.
//!
//! A small encoder maps inputs to L2-normalized embedding vectors. A memory
//! bank keeps one running embedding per training sample, and a non-parametric
//! softmax over bank rows turns dot-product similarity into per-instance
//! probabilities. Training pulls each sample toward a set of close neighbors
//! relative to a larger background set; both sets are re-identified as the
//! embedding moves. The crate also ships the evaluation protocols used to
//! judge the learned space: bank-weighted kNN classification, a frozen linear
//! probe, and an embedding-density profile.
//!
//! Concurrency model: every read-side operation takes `&MemoryBank` and may
//! fan out across threads; `MemoryBank::update_rows` takes `&mut` so the
//! borrow checker guarantees no reader observes a half-applied update.

pub mod bank;
pub mod dataset;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod neighbors;
pub mod objective;
pub mod trainer;

mod io;

pub use bank::MemoryBank;
pub use dataset::Dataset;
pub use embedding::{EmbeddingVector, IndexSet, Temperature};
pub use error::LaError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, LaError>;
