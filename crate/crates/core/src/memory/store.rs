use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::RangeInclusive;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::score::{
    composite_score, cosine_similarity, importance_score, normalized_similarity, recency_weight, RetrievalWeights,
};
use super::MemoryError;
use crate::embedding::{Embedder, EmbeddingVector};

pub type RecordId = u64;

/// Number of preceding same-channel records used as importance peers.
pub const DEFAULT_IMPORTANCE_WINDOW: usize = 50;

const LOG_SCHEMA: &str = "collab-memory";
const LOG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Observation,
    Reflection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryRecord {
    pub id: RecordId,
    pub kind: RecordKind,
    pub content: String,
    pub embedding: EmbeddingVector,
    pub created_at: f64,
    pub speaker_id: String,
    pub channel_id: String,
    pub importance: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub source_ids: Vec<RecordId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub dimension: usize,
    pub importance_window: usize,
    pub embedder_version: String,
}

impl MemoryConfig {
    pub fn for_embedder(embedder: &dyn Embedder) -> Self {
        Self {
            dimension: embedder.dimension(),
            importance_window: DEFAULT_IMPORTANCE_WINDOW,
            embedder_version: embedder.version(),
        }
    }
}

/// Input to [`MemoryStore::append`].
#[derive(Debug, Clone)]
pub struct NewMemory {
    pub content: String,
    pub kind: RecordKind,
    pub speaker_id: String,
    pub channel_id: String,
    pub created_at: f64,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone)]
pub struct RetrievalQuery {
    pub query_text: String,
    pub query_embedding: EmbeddingVector,
    pub now: f64,
    pub k: usize,
    pub lambda: f64,
    pub weights: RetrievalWeights,
    /// Restricts retrieval to one channel. `None` searches the whole store.
    pub channel_id: Option<String>,
}

impl RetrievalQuery {
    fn validate(&self, dimension: usize) -> Result<(), MemoryError> {
        if self.k == 0 {
            return Err(MemoryError::Parameter("k must be at least 1".into()));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(MemoryError::Parameter(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !self.now.is_finite() {
            return Err(MemoryError::Parameter("query time must be finite".into()));
        }
        if self.query_embedding.dimension() != dimension {
            return Err(MemoryError::Dimension {
                expected: dimension,
                actual: self.query_embedding.dimension(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredMemory {
    pub record: Arc<MemoryRecord>,
    pub recency: f64,
    pub relevance: f64,
    pub importance: f64,
    pub composite: f64,
}

impl ScoredMemory {
    /// Descending rank order: composite, then recency, then id.
    pub fn rank_cmp(&self, other: &Self) -> std::cmp::Ordering {
        other
            .composite
            .total_cmp(&self.composite)
            .then_with(|| other.recency.total_cmp(&self.recency))
            .then_with(|| other.record.id.cmp(&self.record.id))
    }
}

#[derive(Debug, Error)]
#[error("{0}")]
pub struct SummarizerError(pub String);

/// Condenses a window of transcript text into a reflection.
pub trait Summarizer {
    fn summarize(&self, transcript: &str) -> Result<String, SummarizerError>;
}

impl<F> Summarizer for F
where
    F: Fn(&str) -> Result<String, SummarizerError>,
{
    fn summarize(&self, transcript: &str) -> Result<String, SummarizerError> {
        self(transcript)
    }
}

#[derive(Debug, Clone)]
pub struct ReflectionRequest {
    pub channel_id: String,
    pub window: RangeInclusive<RecordId>,
    pub speaker_id: String,
    pub created_at: f64,
}

/// Append-only in-memory store of [`MemoryRecord`]s.
///
/// Readers take `&self`; the owner serializes writers.
#[derive(Debug, Clone)]
pub struct MemoryStore {
    config: MemoryConfig,
    records: Vec<Arc<MemoryRecord>>,
    by_channel: HashMap<String, Vec<usize>>,
    next_id: RecordId,
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    schema: String,
    version: u32,
    #[serde(flatten)]
    config: MemoryConfig,
}

impl MemoryStore {
    pub fn new(config: MemoryConfig) -> Self {
        assert!(config.dimension > 0, "store dimension must be positive");
        Self {
            config,
            records: Vec::new(),
            by_channel: HashMap::new(),
            next_id: 1,
        }
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &Arc<MemoryRecord>> {
        self.records.iter()
    }

    pub fn channel_records(&self, channel_id: &str) -> impl Iterator<Item = &Arc<MemoryRecord>> {
        self.by_channel
            .get(channel_id)
            .into_iter()
            .flatten()
            .map(|&i| &self.records[i])
    }

    pub fn get(&self, id: RecordId) -> Option<&Arc<MemoryRecord>> {
        // ids are dense from 1 unless the store was loaded from a sparse log
        let guess = id.checked_sub(1).map(|i| i as usize);
        match guess.and_then(|i| self.records.get(i)) {
            Some(r) if r.id == id => Some(r),
            _ => self
                .records
                .binary_search_by_key(&id, |r| r.id)
                .ok()
                .map(|i| &self.records[i]),
        }
    }

    fn trailing_peers(&self, channel_id: &str) -> Vec<&EmbeddingVector> {
        let Some(idx) = self.by_channel.get(channel_id) else {
            return Vec::new();
        };
        let start = idx.len().saturating_sub(self.config.importance_window);
        idx[start..].iter().map(|&i| &self.records[i].embedding).collect()
    }

    fn check_dimension(&self, v: &EmbeddingVector) -> Result<(), MemoryError> {
        if v.dimension() != self.config.dimension {
            return Err(MemoryError::Dimension {
                expected: self.config.dimension,
                actual: v.dimension(),
            });
        }
        Ok(())
    }

    fn insert(&mut self, record: MemoryRecord) -> Arc<MemoryRecord> {
        let record = Arc::new(record);
        self.next_id = record.id + 1;
        self.by_channel
            .entry(record.channel_id.clone())
            .or_default()
            .push(self.records.len());
        self.records.push(Arc::clone(&record));
        record
    }

    /// Stores a new record, computing and caching its importance against
    /// the trailing window of its channel.
    pub fn append(&mut self, new: NewMemory) -> Result<Arc<MemoryRecord>, MemoryError> {
        self.append_with_sources(new, Vec::new())
    }

    fn append_with_sources(
        &mut self,
        new: NewMemory,
        source_ids: Vec<RecordId>,
    ) -> Result<Arc<MemoryRecord>, MemoryError> {
        self.check_dimension(&new.embedding)?;
        if !new.created_at.is_finite() {
            return Err(MemoryError::Parameter("created_at must be finite".into()));
        }
        if (new.kind == RecordKind::Reflection) == source_ids.is_empty() {
            return Err(MemoryError::Parameter(
                "reflections need source ids and observations must have none".into(),
            ));
        }
        let importance = importance_score(&new.embedding, &self.trailing_peers(&new.channel_id))?;
        let record = MemoryRecord {
            id: self.next_id,
            kind: new.kind,
            content: new.content,
            embedding: new.embedding,
            created_at: new.created_at,
            speaker_id: new.speaker_id,
            channel_id: new.channel_id,
            importance,
            source_ids,
        };
        Ok(self.insert(record))
    }

    fn score(&self, record: &Arc<MemoryRecord>, q: &RetrievalQuery) -> Result<ScoredMemory, MemoryError> {
        let recency = recency_weight(q.now - record.created_at, q.lambda)?;
        let relevance = normalized_similarity(cosine_similarity(&record.embedding, &q.query_embedding)?);
        let importance = record.importance;
        let composite = composite_score(recency, relevance, importance, &q.weights)?;
        Ok(ScoredMemory {
            record: Arc::clone(record),
            recency,
            relevance,
            importance,
            composite,
        })
    }

    /// Scores every candidate record, in insertion order.
    pub fn score_all(&self, q: &RetrievalQuery) -> Result<Vec<ScoredMemory>, MemoryError> {
        self.score_where(q, |_| true)
    }

    fn score_where(
        &self,
        q: &RetrievalQuery,
        keep: impl Fn(&MemoryRecord) -> bool,
    ) -> Result<Vec<ScoredMemory>, MemoryError> {
        q.validate(self.config.dimension)?;
        let candidates: Box<dyn Iterator<Item = &Arc<MemoryRecord>>> = match &q.channel_id {
            Some(c) => Box::new(self.channel_records(c)),
            None => Box::new(self.records.iter()),
        };
        candidates.filter(|r| keep(r)).map(|r| self.score(r, q)).collect()
    }

    /// Top `k` records by composite score, best first.
    pub fn retrieve_top_k(&self, q: &RetrievalQuery) -> Result<Vec<ScoredMemory>, MemoryError> {
        self.retrieve_top_k_where(q, |_| true)
    }

    /// [`retrieve_top_k`](Self::retrieve_top_k) over the records accepted by `keep`.
    pub fn retrieve_top_k_where(
        &self,
        q: &RetrievalQuery,
        keep: impl Fn(&MemoryRecord) -> bool,
    ) -> Result<Vec<ScoredMemory>, MemoryError> {
        let mut scored = self.score_where(q, keep)?;
        if scored.len() > q.k {
            scored.select_nth_unstable_by(q.k - 1, ScoredMemory::rank_cmp);
            scored.truncate(q.k);
        }
        scored.sort_by(ScoredMemory::rank_cmp);
        Ok(scored)
    }

    /// Summarizes the channel records with ids in `req.window` into a new
    /// reflection record.
    pub fn synthesize_reflection(
        &mut self,
        embedder: &dyn Embedder,
        req: ReflectionRequest,
        summarizer: &dyn Summarizer,
    ) -> Result<Arc<MemoryRecord>, MemoryError> {
        let sources: Vec<&Arc<MemoryRecord>> = self
            .channel_records(&req.channel_id)
            .filter(|r| req.window.contains(&r.id))
            .collect();
        if sources.is_empty() {
            return Err(MemoryError::EmptyWindow(req.channel_id));
        }
        let transcript = sources
            .iter()
            .map(|r| format!("{}: {}", r.speaker_id, r.content))
            .collect::<Vec<_>>()
            .join("\n");
        let source_ids: Vec<RecordId> = sources.iter().map(|r| r.id).collect();
        let content = summarizer.summarize(&transcript)?;
        let content = content.trim().to_string();
        if content.is_empty() {
            return Err(MemoryError::EmptySummary);
        }
        let embedding = embedder.embed(&content)?;
        self.append_with_sources(
            NewMemory {
                content,
                kind: RecordKind::Reflection,
                speaker_id: req.speaker_id,
                channel_id: req.channel_id,
                created_at: req.created_at,
                embedding,
            },
            source_ids,
        )
    }

    /// Writes a header line followed by one JSON record per line.
    pub fn write_log<W: Write>(&self, mut out: W) -> Result<(), MemoryError> {
        let header = LogHeader {
            schema: LOG_SCHEMA.into(),
            version: LOG_VERSION,
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut out, &header).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut out, r.as_ref()).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a log written by [`write_log`](Self::write_log). Cached
    /// importance values are kept as stored.
    pub fn read_log<R: BufRead>(input: R) -> Result<Option<Self>, MemoryError> {
        let mut lines = input.lines().enumerate().filter_map(|(i, l)| match l {
            Ok(l) if l.trim().is_empty() => None,
            other => Some((i + 1, other)),
        });
        let Some((line, header)) = lines.next() else {
            return Ok(None);
        };
        let bad = |line: usize, message: String| MemoryError::Log { line, message };
        let header: LogHeader = serde_json::from_str(&header?).map_err(|e| bad(line, e.to_string()))?;
        if header.schema != LOG_SCHEMA || header.version != LOG_VERSION {
            return Err(bad(
                line,
                format!("unsupported schema {} v{}", header.schema, header.version),
            ));
        }
        if header.config.dimension == 0 {
            return Err(bad(line, "dimension must be positive".into()));
        }
        let mut store = MemoryStore::new(header.config);
        for (line, text) in lines {
            let record: MemoryRecord = serde_json::from_str(&text?).map_err(|e| bad(line, e.to_string()))?;
            if record.id < store.next_id {
                return Err(bad(line, format!("record id {} is not increasing", record.id)));
            }
            if record.embedding.dimension() != store.dimension() {
                return Err(bad(line, "embedding dimension mismatch".into()));
            }
            if !(0.0..=1.0).contains(&record.importance) {
                return Err(bad(line, "importance outside [0, 1]".into()));
            }
            if (record.kind == RecordKind::Reflection) == record.source_ids.is_empty() {
                return Err(bad(line, "source ids inconsistent with record kind".into()));
            }
            store.insert(record);
        }
        Ok(Some(store))
    }
}
