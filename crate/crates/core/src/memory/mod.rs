//! Conversational memory stream.
//!
//! Every message is stored as an immutable [`MemoryRecord`] carrying its
//! embedding and an importance score cached at ingest time. Retrieval ranks
//! records of a channel by a weighted sum of
//!
//! * recency: `e^(-lambda * (now - created_at))`,
//! * relevance: cosine to the query, mapped onto [0, 1],
//! * importance: mean mapped cosine to the preceding records of the channel,
//!
//! and returns the top `k`.

mod score;
mod store;

pub use score::{
    composite_score, cosine_similarity, importance_score, normalized_similarity, recency_weight, RetrievalWeights,
};
pub use store::{
    MemoryConfig, MemoryRecord, MemoryStore, NewMemory, RecordId, RecordKind, ReflectionRequest, RetrievalQuery,
    ScoredMemory, Summarizer, SummarizerError, DEFAULT_IMPORTANCE_WINDOW,
};

use thiserror::Error;

/// Decay constant giving a one hour half-life.
pub const DEFAULT_LAMBDA: f64 = std::f64::consts::LN_2 / 3600.0;
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("embedding dimension {actual} does not match store dimension {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("reflection window selects no records in channel {0}")]
    EmptyWindow(String),
    #[error("summarizer failed: {0}")]
    Summarizer(#[from] SummarizerError),
    #[error("reflection summary is empty")]
    EmptySummary,
    #[error(transparent)]
    Embed(#[from] crate::embedding::EmbedError),
    #[error("memory log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
