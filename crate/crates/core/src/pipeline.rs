//! Glue between stages: JSONL files, record-to-entry conversion, and engine
//! construction from an [`AppConfig`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::embedding::{build_embedder, EmbedError, Embedder};
use crate::engine::RagEngine;
use crate::index::{IndexConfig, IndexError, SharedIndex, VectorEntry, VectorIndex};
use crate::ingest::Chunk;
use crate::llm::build_chat_provider;
use crate::prompts::PromptRegistry;
use crate::structure::DrugRecord;
use crate::AppConfig;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {reason}")]
    Jsonl { path: String, line: usize, reason: String },
    #[error("record {record:?} cites chunk {chunk_id:?}, which is not in the chunk file")]
    UnknownChunk { record: String, chunk_id: String },
    #[error("record {0:?} has no source chunks")]
    NoProvenance(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("{0}")]
    Config(String),
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let reader = BufReader::new(File::open(path)?);
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| PipelineError::Jsonl {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(items)
}

/// Embeds each record's labeled text and attaches the provenance of its
/// source chunks. The entry id is the record's first source chunk id.
pub async fn record_entries(
    records: &[DrugRecord],
    chunks: &[Chunk],
    embedder: &dyn Embedder,
) -> Result<Vec<VectorEntry>, PipelineError> {
    let by_id: HashMap<&str, &Chunk> = chunks.iter().map(|c| (c.chunk_id.as_str(), c)).collect();
    let mut provenance = Vec::with_capacity(records.len());
    for r in records {
        let first = r
            .source_chunk_ids
            .first()
            .ok_or_else(|| PipelineError::NoProvenance(r.name.clone()))?;
        let mut cited = Vec::new();
        for id in &r.source_chunk_ids {
            cited.push(*by_id.get(id.as_str()).ok_or_else(|| PipelineError::UnknownChunk {
                record: r.name.clone(),
                chunk_id: id.clone(),
            })?);
        }
        let page_start = cited.iter().map(|c| c.page_start).min().unwrap_or(1);
        let page_end = cited.iter().map(|c| c.page_end).max().unwrap_or(page_start);
        provenance.push((first.clone(), cited[0].doc_id.clone(), page_start, page_end));
    }
    let texts: Vec<String> = records.iter().map(DrugRecord::to_labeled_text).collect();
    let vectors = embedder.embed_batch(&texts).await?;
    Ok(records
        .iter()
        .zip(texts)
        .zip(vectors)
        .zip(provenance)
        .map(|(((r, text), v), (chunk_id, doc_id, page_start, page_end))| {
            let payload = json!({
                "doc_id": doc_id,
                "chunk_id": chunk_id,
                "page_start": page_start,
                "page_end": page_end,
                "name": r.name,
                "text": text,
            });
            VectorEntry {
                entry_id: chunk_id,
                vector: v.values,
                payload: payload.as_object().cloned().unwrap_or_default(),
            }
        })
        .collect())
}

/// Index defaults taken from the config.
pub fn index_config(cfg: &AppConfig) -> IndexConfig {
    IndexConfig {
        dimension: cfg.embedder.dimension,
        default_threshold: cfg.retrieval.threshold,
        default_k: cfg.retrieval.k,
    }
}

/// Loads an index and checks its dimension against the configured embedder.
pub fn load_index(cfg: &AppConfig, path: &Path) -> Result<VectorIndex, PipelineError> {
    let index = VectorIndex::load_with(path, index_config(cfg))?;
    if index.dimension() != cfg.embedder.dimension {
        return Err(PipelineError::Config(format!(
            "index {} has dimension {}, but the embedder produces {}",
            path.display(),
            index.dimension(),
            cfg.embedder.dimension
        )));
    }
    Ok(index)
}

/// Builds the configured embedder, chat provider and prompt registry around `index`.
pub fn build_engine(cfg: &AppConfig, index: VectorIndex) -> Result<RagEngine, PipelineError> {
    let embedder: Arc<dyn Embedder> = build_embedder(&cfg.embedder)?;
    let llm = build_chat_provider(&cfg.llm).map_err(|e| PipelineError::Config(e.to_string()))?;
    let registry = PromptRegistry::new(cfg.prompts.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(RagEngine::new(
        embedder,
        SharedIndex::new(index),
        llm,
        Arc::new(registry),
        cfg.llm.clone(),
        cfg.engine_config(),
    ))
}
