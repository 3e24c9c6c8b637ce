//! Text embedders: a deterministic hashed bag-of-tokens embedder for tests
//! and simulations, and a remote JSON embeddings client.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::InflightLimiter;

/// Default dimension of the local hashed embedder.
pub const DEFAULT_LOCAL_DIMENSION: usize = 4096;

/// Version tag of the local embedder. Persisted stores record it so that
/// embeddings from different hash schemes are never compared.
pub const LOCAL_EMBEDDER_VERSION: &str = "hash-fnv1a64-v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("text to embed is empty")]
    EmptyText,
    #[error("batch element {index}: {source}")]
    InvalidElement {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("embedding has non-finite entry at position {0}")]
    NonFinite(usize),
    #[error("embedding dimension {actual} does not match configured {expected}")]
    Dimension { expected: usize, actual: usize },
    #[error("embedding provider error (attempt {attempts}, retryable: {retryable}): {message}")]
    Provider {
        message: String,
        retryable: bool,
        attempts: u32,
    },
}

/// A fixed-dimension vector of finite reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(dimension: usize) -> Self {
        Self(vec![0.0; dimension])
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// Returns a copy scaled to unit length; the zero vector stays zero.
    pub fn normalized(&self) -> Self {
        let n = self.norm();
        if n == 0.0 {
            return self.clone();
        }
        Self(self.0.iter().map(|v| v / n).collect())
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Anything that maps text to vectors of one fixed dimension.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// Identifier stored alongside persisted embeddings.
    fn version(&self) -> String;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.embed(t).map_err(|e| EmbedError::InvalidElement {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

/// Splits on non-alphanumeric characters and lowercases each token.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

/// 64-bit FNV-1a. Fixed so bucket assignment is stable across platforms
/// and releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

/// Hashed bag-of-tokens embedder with L2-normalized count vectors.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension }
    }

    pub fn bucket_of(&self, token: &str) -> usize {
        (fnv1a64(token.as_bytes()) % self.dimension as u64) as usize
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_LOCAL_DIMENSION)
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn version(&self) -> String {
        format!("{LOCAL_EMBEDDER_VERSION}/{}", self.dimension)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let mut counts = vec![0.0f64; self.dimension];
        for token in tokenize(text) {
            counts[self.bucket_of(&token)] += 1.0;
        }
        Ok(EmbeddingVector(counts).normalized())
    }
}

/// Client for a JSON-over-HTTPS embeddings endpoint.
///
/// Request body: `{"model": ..., "input": [...]}`. The response may be either
/// a bare array of float arrays or the `{"data": [{"embedding": [...]}]}` shape.
pub struct RemoteEmbedder {
    endpoint: String,
    api_key: String,
    model: String,
    dimension: usize,
    client: reqwest::blocking::Client,
    limiter: InflightLimiter,
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [&'a str],
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EmbeddingsResponse {
    Bare(Vec<Vec<f64>>),
    Data { data: Vec<EmbeddingDatum> },
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: impl Into<String>,
        model: impl Into<String>,
        dimension: usize,
        max_concurrent: usize,
    ) -> Result<Self, EmbedError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| EmbedError::Provider {
                message: e.to_string(),
                retryable: false,
                attempts: 0,
            })?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            model: model.into(),
            dimension,
            client,
            limiter: InflightLimiter::new(max_concurrent),
        })
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let _permit = self.limiter.acquire();
        let provider = |message: String, retryable: bool| EmbedError::Provider {
            message,
            retryable,
            attempts: 1,
        };
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&EmbeddingsRequest {
                model: &self.model,
                input: texts,
            })
            .send()
            .map_err(|e| provider(e.to_string(), true))?;
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            return Err(provider(format!("HTTP {status}"), retryable));
        }
        let body: EmbeddingsResponse = resp.json().map_err(|e| provider(e.to_string(), false))?;
        let rows = match body {
            EmbeddingsResponse::Bare(rows) => rows,
            EmbeddingsResponse::Data { data } => data.into_iter().map(|d| d.embedding).collect(),
        };
        if rows.len() != texts.len() {
            return Err(provider(
                format!("expected {} embeddings, got {}", texts.len(), rows.len()),
                false,
            ));
        }
        rows.into_iter()
            .map(|row| {
                if row.len() != self.dimension {
                    return Err(EmbedError::Dimension {
                        expected: self.dimension,
                        actual: row.len(),
                    });
                }
                EmbeddingVector::new(row)
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn version(&self) -> String {
        format!("remote:{}/{}", self.model, self.dimension)
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        if text.trim().is_empty() {
            return Err(EmbedError::EmptyText);
        }
        Ok(self.request(&[text])?.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::InvalidElement {
                index,
                source: Box::new(EmbedError::EmptyText),
            });
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.request(texts)
    }
}
