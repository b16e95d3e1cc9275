//! Dense text embeddings behind one interface.
//!
//! Every vector leaving this module is L2-normalized, so cosine similarity
//! downstream is a plain dot product. Two providers ship:
//!
//! - [`RemoteEmbedder`] speaks the OpenAI-compatible `POST /embeddings` wire
//!   format.
//! - [`TestFnvEmbedder`] hashes byte trigrams with 64-bit FNV-1a into a fixed
//!   number of buckets. It has no semantic knowledge, but texts sharing
//!   character trigrams score higher, and the output is identical on every
//!   platform, which is what offline tests need.

use std::sync::Arc;

use async_trait::async_trait;
use futures::{StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use crate::http::{self, ProviderError, RetryPolicy};

pub const DEFAULT_DIMENSION: usize = 1536;
pub const EMBED_API_KEY_ENV: &str = "DRUG_INSIGHTS_EMBED_API_KEY";

/// Sub-batches of one `embed_batch` call allowed in flight at once.
const MAX_IN_FLIGHT: usize = 4;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("input {index} is empty")]
    EmptyText { index: usize },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("provider returned a vector of length {actual} for input {index}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, actual: usize },
    #[error("provider returned a zero vector for input {index}")]
    ZeroVector { index: usize },
    #[error("provider returned {actual} embeddings for {expected} inputs")]
    CountMismatch { expected: usize, actual: usize },
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f32>,
    pub provider_id: String,
}

impl EmbeddingVector {
    pub fn dimension(&self) -> usize {
        self.values.len()
    }

    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        dot(&self.values, &other.values)
    }
}

/// Dot product accumulated in f64. For unit vectors this is the cosine.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Scales `raw` to unit L2 norm. `None` for a zero (or non-finite) vector.
pub fn normalize(raw: &[f64]) -> Option<Vec<f32>> {
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    Some(raw.iter().map(|x| (x / norm) as f32).collect())
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn fnv_accumulate(text: &str, dimension: usize) -> Vec<f64> {
    let bytes = text.as_bytes().to_ascii_lowercase();
    let mut acc = vec![0.0f64; dimension];
    let mut add = |window: &[u8]| acc[(fnv1a64(window) % dimension as u64) as usize] += 1.0;
    if bytes.len() < 3 {
        add(&bytes);
    } else {
        bytes.windows(3).for_each(&mut add);
    }
    acc
}

/// The deterministic trigram embedding of `text`.
pub fn test_embed(text: &str, dimension: usize) -> Result<EmbeddingVector, EmbedError> {
    if dimension == 0 {
        return Err(EmbedError::InvalidConfig("dimension must be >= 1".into()));
    }
    if text.trim().is_empty() {
        return Err(EmbedError::EmptyText { index: 0 });
    }
    let values = normalize(&fnv_accumulate(text, dimension)).ok_or(EmbedError::ZeroVector { index: 0 })?;
    Ok(EmbeddingVector {
        values,
        provider_id: TestFnvEmbedder::PROVIDER_ID.to_string(),
    })
}

#[async_trait]
pub trait Embedder: Send + Sync {
    fn provider_id(&self) -> &str;

    fn dimension(&self) -> usize;

    fn max_batch(&self) -> usize;

    /// One provider round trip for at most `max_batch` non-empty texts.
    /// Returns raw (not yet normalized) vectors in input order.
    async fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;

    /// Embeds `texts` in order, splitting into `max_batch`-sized requests and
    /// normalizing every vector to unit length.
    async fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText { index });
        }
        let max_batch = self.max_batch().max(1);
        let dimension = self.dimension();
        let provider_id = self.provider_id().to_string();
        let ranges: Vec<(usize, usize)> = (0..texts.len())
            .step_by(max_batch)
            .map(|start| (start, (start + max_batch).min(texts.len())))
            .collect();
        let batches: Vec<Vec<Vec<f64>>> = futures::stream::iter(ranges)
            .map(|(start, end)| async move {
                let chunk = &texts[start..end];
                let raw = self.embed_raw(chunk).await?;
                if raw.len() != chunk.len() {
                    return Err(EmbedError::CountMismatch {
                        expected: chunk.len(),
                        actual: raw.len(),
                    });
                }
                for (i, v) in raw.iter().enumerate() {
                    if v.len() != dimension {
                        return Err(EmbedError::DimensionMismatch {
                            index: start + i,
                            expected: dimension,
                            actual: v.len(),
                        });
                    }
                }
                Ok(raw)
            })
            .buffered(MAX_IN_FLIGHT)
            .try_collect()
            .await?;
        batches
            .into_iter()
            .flatten()
            .enumerate()
            .map(|(index, raw)| {
                normalize(&raw)
                    .map(|values| EmbeddingVector {
                        values,
                        provider_id: provider_id.clone(),
                    })
                    .ok_or(EmbedError::ZeroVector { index })
            })
            .collect()
    }

    async fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text.to_string()]).await?;
        Ok(out.remove(0))
    }
}

#[derive(Debug, Clone)]
pub struct TestFnvEmbedder {
    dimension: usize,
    max_batch: usize,
}

impl TestFnvEmbedder {
    pub const PROVIDER_ID: &'static str = "test-fnv";

    pub fn new(dimension: usize) -> Self {
        TestFnvEmbedder {
            dimension: dimension.max(1),
            max_batch: 64,
        }
    }

    pub fn with_max_batch(mut self, max_batch: usize) -> Self {
        self.max_batch = max_batch.max(1);
        self
    }
}

#[async_trait]
impl Embedder for TestFnvEmbedder {
    fn provider_id(&self) -> &str {
        Self::PROVIDER_ID
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn max_batch(&self) -> usize {
        self.max_batch
    }

    async fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| fnv_accumulate(t, self.dimension)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedProvider {
    Remote,
    #[default]
    TestFnv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub provider: EmbedProvider,
    pub endpoint_url: String,
    pub model_name: String,
    pub dimension: usize,
    pub max_batch: usize,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            provider: EmbedProvider::TestFnv,
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "text-embedding-ada-002".into(),
            dimension: DEFAULT_DIMENSION,
            max_batch: 64,
            retry: RetryPolicy::default(),
            timeout_ms: 30_000,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension == 0 {
            return Err(EmbedError::InvalidConfig("dimension must be >= 1".into()));
        }
        if self.max_batch == 0 {
            return Err(EmbedError::InvalidConfig("max_batch must be >= 1".into()));
        }
        Ok(())
    }

    /// Provider id as recorded in evaluation reports.
    pub fn scorer_id(&self) -> String {
        match self.provider {
            EmbedProvider::TestFnv => format!("{}/{}", TestFnvEmbedder::PROVIDER_ID, self.dimension),
            EmbedProvider::Remote => format!("remote:{}/{}", self.model_name, self.dimension),
        }
    }
}

pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Arc<dyn Embedder>, EmbedError> {
    cfg.validate()?;
    Ok(match cfg.provider {
        EmbedProvider::TestFnv => Arc::new(TestFnvEmbedder::new(cfg.dimension).with_max_batch(cfg.max_batch)),
        EmbedProvider::Remote => Arc::new(RemoteEmbedder::new(cfg.clone())?),
    })
}

pub struct RemoteEmbedder {
    cfg: EmbedderConfig,
    client: reqwest::Client,
    api_key: Option<String>,
    provider_id: String,
}

#[derive(Serialize)]
struct EmbeddingsRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl RemoteEmbedder {
    /// Reads the bearer token from `DRUG_INSIGHTS_EMBED_API_KEY` if set.
    pub fn new(cfg: EmbedderConfig) -> Result<Self, EmbedError> {
        let api_key = std::env::var(EMBED_API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(cfg, api_key)
    }

    pub fn with_api_key(cfg: EmbedderConfig, api_key: Option<String>) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let client = http::build_client(cfg.timeout_ms)?;
        let provider_id = cfg.scorer_id();
        Ok(RemoteEmbedder {
            cfg,
            client,
            api_key,
            provider_id,
        })
    }
}

#[async_trait]
impl Embedder for RemoteEmbedder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dimension(&self) -> usize {
        self.cfg.dimension
    }

    fn max_batch(&self) -> usize {
        self.cfg.max_batch
    }

    async fn embed_raw(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let url = http::join_url(&self.cfg.endpoint_url, "embeddings");
        let body = EmbeddingsRequest {
            model: &self.cfg.model_name,
            input: texts,
        };
        let resp: EmbeddingsResponse =
            http::post_json(&self.client, &url, self.api_key.as_deref(), &body, &self.cfg.retry).await?;
        if resp.data.len() != texts.len() {
            return Err(EmbedError::CountMismatch {
                expected: texts.len(),
                actual: resp.data.len(),
            });
        }
        let mut slots: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        for (pos, datum) in resp.data.into_iter().enumerate() {
            let index = datum.index.unwrap_or(pos);
            match slots.get_mut(index) {
                Some(slot @ None) => *slot = Some(datum.embedding),
                _ => {
                    return Err(ProviderError::InvalidResponse(format!(
                        "embedding index {index} is out of range or repeated"
                    ))
                    .into())
                }
            }
        }
        Ok(slots.into_iter().map(|s| s.expect("all slots filled")).collect())
    }
}
