//! Exact cosine nearest-neighbour index over unit vectors.
//!
//! Search is a flat scan: every stored vector is scored against the query,
//! entries below the threshold are dropped, and the `k` best survive. Results
//! are ordered by descending score with ties broken by ascending `entry_id`,
//! so identical inputs always produce identical result lists.

mod codec;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use parking_lot::{RwLock, RwLockReadGuard, RwLockWriteGuard};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::embedding::{dot, l2_norm};

pub use codec::{FORMAT_VERSION, MAGIC};

pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const DEFAULT_K: usize = 3;

/// Accepted deviation of a stored or query vector's norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

pub type Payload = Map<String, Value>;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("vector for {entry_id:?} has length {actual}, index dimension is {expected}")]
    DimensionMismatch {
        entry_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("entry id {0:?} appears more than once in one upsert")]
    DuplicateInBatch(String),
    #[error("vector for {entry_id:?} is not unit length (norm {norm})")]
    NotNormalized { entry_id: String, norm: f64 },
    #[error("payload of {entry_id:?} is invalid: {reason}")]
    InvalidPayload { entry_id: String, reason: String },
    #[error("invalid search parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid index config: {0}")]
    InvalidConfig(String),
    #[error("corrupt index file at byte {offset}: {reason}")]
    CorruptIndex { offset: u64, reason: String },
    #[error("index file format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("index I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorEntry {
    pub entry_id: String,
    pub vector: Vec<f32>,
    /// Must carry `doc_id`, `page_start`, `page_end` and `text`.
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entry_id: String,
    pub score: f64,
    pub payload: Payload,
}

impl RetrievalResult {
    pub fn doc_id(&self) -> &str {
        self.payload.get("doc_id").and_then(Value::as_str).unwrap_or_default()
    }

    pub fn text(&self) -> &str {
        self.payload.get("text").and_then(Value::as_str).unwrap_or_default()
    }

    pub fn page_start(&self) -> u32 {
        payload_u32(&self.payload, "page_start")
    }

    pub fn page_end(&self) -> u32 {
        payload_u32(&self.payload, "page_end")
    }

    /// Chunk the entry came from; falls back to the entry id.
    pub fn chunk_id(&self) -> &str {
        self.payload
            .get("chunk_id")
            .and_then(Value::as_str)
            .unwrap_or(&self.entry_id)
    }
}

fn payload_u32(p: &Payload, key: &str) -> u32 {
    p.get(key).and_then(Value::as_u64).unwrap_or(0) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub dimension: usize,
    pub default_threshold: f64,
    pub default_k: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            dimension: crate::embedding::DEFAULT_DIMENSION,
            default_threshold: DEFAULT_THRESHOLD,
            default_k: DEFAULT_K,
        }
    }
}

impl IndexConfig {
    pub fn with_dimension(dimension: usize) -> Self {
        IndexConfig {
            dimension,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), IndexError> {
        if self.dimension == 0 {
            return Err(IndexError::InvalidConfig("dimension must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.default_threshold) {
            return Err(IndexError::InvalidConfig("default_threshold must be in [0, 1]".into()));
        }
        if self.default_k == 0 {
            return Err(IndexError::InvalidConfig("default_k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UpsertOutcome {
    pub inserted: usize,
    pub replaced: usize,
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    config: IndexConfig,
    entries: Vec<VectorEntry>,
    positions: HashMap<String, usize>,
}

impl VectorIndex {
    pub fn new(config: IndexConfig) -> Result<Self, IndexError> {
        config.validate()?;
        Ok(VectorIndex {
            config,
            entries: Vec::new(),
            positions: HashMap::new(),
        })
    }

    pub fn config(&self) -> &IndexConfig {
        &self.config
    }

    /// Replaces the retrieval defaults; the dimension is fixed.
    pub fn set_defaults(&mut self, threshold: f64, k: usize) -> Result<(), IndexError> {
        let config = IndexConfig {
            dimension: self.config.dimension,
            default_threshold: threshold,
            default_k: k,
        };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.config.dimension
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, entry_id: &str) -> Option<&VectorEntry> {
        self.positions.get(entry_id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[VectorEntry] {
        &self.entries
    }

    /// Inserts new entries and replaces existing ones. The whole batch is
    /// validated before anything is applied.
    pub fn upsert(&mut self, batch: Vec<VectorEntry>) -> Result<UpsertOutcome, IndexError> {
        let mut seen = HashSet::with_capacity(batch.len());
        for e in &batch {
            if !seen.insert(e.entry_id.as_str()) {
                return Err(IndexError::DuplicateInBatch(e.entry_id.clone()));
            }
            self.check_vector(&e.entry_id, &e.vector)?;
            check_payload(e)?;
        }
        let mut outcome = UpsertOutcome::default();
        for e in batch {
            match self.positions.get(&e.entry_id) {
                Some(&i) => {
                    self.entries[i] = e;
                    outcome.replaced += 1;
                }
                None => {
                    self.positions.insert(e.entry_id.clone(), self.entries.len());
                    self.entries.push(e);
                    outcome.inserted += 1;
                }
            }
        }
        Ok(outcome)
    }

    fn check_vector(&self, entry_id: &str, v: &[f32]) -> Result<(), IndexError> {
        if v.len() != self.config.dimension {
            return Err(IndexError::DimensionMismatch {
                entry_id: entry_id.to_string(),
                expected: self.config.dimension,
                actual: v.len(),
            });
        }
        let norm = l2_norm(v);
        if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(IndexError::NotNormalized {
                entry_id: entry_id.to_string(),
                norm,
            });
        }
        Ok(())
    }

    /// The `k` highest-scoring entries with score >= `threshold`, best first.
    pub fn search(&self, query: &[f32], k: usize, threshold: f64) -> Result<Vec<RetrievalResult>, IndexError> {
        self.check_vector("<query>", query)?;
        if k == 0 {
            return Err(IndexError::InvalidParameter("k must be >= 1".into()));
        }
        if threshold.is_nan() {
            return Err(IndexError::InvalidParameter("threshold is NaN".into()));
        }

        // Min-heap on rank: the root is the worst of the current best k.
        let mut heap: BinaryHeap<std::cmp::Reverse<Ranked<'_>>> = BinaryHeap::with_capacity(k + 1);
        for entry in &self.entries {
            let score = dot(query, &entry.vector);
            if score < threshold {
                continue;
            }
            let candidate = Ranked {
                score,
                id: &entry.entry_id,
                entry,
            };
            if heap.len() < k {
                heap.push(std::cmp::Reverse(candidate));
            } else if let Some(worst) = heap.peek() {
                if candidate > worst.0 {
                    heap.pop();
                    heap.push(std::cmp::Reverse(candidate));
                }
            }
        }
        let mut ranked: Vec<Ranked<'_>> = heap.into_iter().map(|r| r.0).collect();
        ranked.sort_by(|a, b| b.cmp(a));
        Ok(ranked
            .into_iter()
            .map(|r| RetrievalResult {
                entry_id: r.entry.entry_id.clone(),
                score: r.score,
                payload: r.entry.payload.clone(),
            })
            .collect())
    }

    /// Search with the configured default `k` and threshold.
    pub fn search_default(&self, query: &[f32]) -> Result<Vec<RetrievalResult>, IndexError> {
        self.search(query, self.config.default_k, self.config.default_threshold)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::encode(self.config.dimension, &self.entries)
    }

    /// Decodes an index file image. Retrieval defaults come from `defaults`;
    /// the dimension always comes from the file.
    pub fn from_bytes(bytes: &[u8], defaults: IndexConfig) -> Result<Self, IndexError> {
        let (dimension, entries) = codec::decode(bytes)?;
        let config = IndexConfig { dimension, ..defaults };
        config.validate()?;
        let positions = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.entry_id.clone(), i))
            .collect();
        Ok(VectorIndex {
            config,
            entries,
            positions,
        })
    }

    /// Writes the index to `path` through a temporary file and a rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp-write");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        Self::load_with(path, IndexConfig::default())
    }

    pub fn load_with(path: impl AsRef<Path>, defaults: IndexConfig) -> Result<Self, IndexError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, defaults)
    }
}

fn check_payload(e: &VectorEntry) -> Result<(), IndexError> {
    let invalid = |reason: &str| IndexError::InvalidPayload {
        entry_id: e.entry_id.clone(),
        reason: reason.to_string(),
    };
    if !e.payload.get("doc_id").is_some_and(Value::is_string) {
        return Err(invalid("doc_id must be a string"));
    }
    for key in ["page_start", "page_end"] {
        if !e.payload.get(key).is_some_and(Value::is_u64) {
            return Err(invalid(&format!("{key} must be a non-negative integer")));
        }
    }
    if !e.payload.get("text").is_some_and(Value::is_string) {
        return Err(invalid("text must be a string"));
    }
    Ok(())
}

/// Rank order: higher score first, then lower entry id.
struct Ranked<'a> {
    score: f64,
    id: &'a str,
    entry: &'a VectorEntry,
}

impl PartialEq for Ranked<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Ranked<'_> {}

impl PartialOrd for Ranked<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Ranked<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.id.cmp(self.id))
    }
}

/// Reader-writer handle: many concurrent searches or one upsert.
#[derive(Debug, Clone)]
pub struct SharedIndex(Arc<RwLock<VectorIndex>>);

impl SharedIndex {
    pub fn new(index: VectorIndex) -> Self {
        SharedIndex(Arc::new(RwLock::new(index)))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, VectorIndex> {
        self.0.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, VectorIndex> {
        self.0.write()
    }
}
