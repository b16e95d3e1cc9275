//! Document ingestion: source files to ordered text blocks, text blocks to
//! overlapping character chunks.
//!
//! Three source formats are understood:
//!
//! - `plaintext`: the whole file is one page, blocks are paragraphs separated
//!   by blank lines.
//! - `jsonl-blocks`: one `{"page": .., "order": .., "text": ..}` record per
//!   line, produced by an external layout-aware extractor. An optional first
//!   line `{"meta": {"title": .., "author": ..}}` carries document metadata.
//! - `pdf`: a baseline extractor for single-column text PDFs. Multi-column
//!   layouts come out in content-stream order, which is often wrong; run a
//!   layout-aware tool and feed its output as `jsonl-blocks` instead.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const DEFAULT_CHUNK_SIZE: usize = 1000;
pub const DEFAULT_OVERLAP: usize = 150;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    UnreadableSource {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed block record on line {line}: {reason}")]
    MalformedBlockRecord { line: usize, reason: String },
    #[error("document {0} contains no text")]
    EmptyDocument(String),
    #[error("invalid chunk parameters: chunk_size={chunk_size}, overlap={overlap} (need 0 <= overlap < chunk_size)")]
    InvalidChunkParams { chunk_size: usize, overlap: usize },
    #[error("duplicate document id {0:?} in corpus")]
    DuplicateDocId(String),
    #[error("cannot extract text from {path}: {reason}")]
    Extraction { path: String, reason: String },
    #[error("format {0} is not supported by this build")]
    UnsupportedFormat(SourceFormat),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    Plaintext,
    JsonlBlocks,
    Pdf,
}

impl SourceFormat {
    /// File extension picked up when a directory is ingested.
    pub fn extension(self) -> &'static str {
        match self {
            SourceFormat::Plaintext => "txt",
            SourceFormat::JsonlBlocks => "jsonl",
            SourceFormat::Pdf => "pdf",
        }
    }
}

impl fmt::Display for SourceFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceFormat::Plaintext => "plaintext",
            SourceFormat::JsonlBlocks => "jsonl-blocks",
            SourceFormat::Pdf => "pdf",
        })
    }
}

impl FromStr for SourceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plaintext" => Ok(SourceFormat::Plaintext),
            "jsonl-blocks" => Ok(SourceFormat::JsonlBlocks),
            "pdf" => Ok(SourceFormat::Pdf),
            other => Err(format!("unknown source format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentMeta {
    pub doc_id: String,
    pub title: Option<String>,
    pub author: Option<String>,
    pub source_path: String,
    pub page_count: u32,
    pub ingested_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBlock {
    pub doc_id: String,
    pub page: u32,
    /// Reading-order rank within the page.
    pub order: u32,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub page_start: u32,
    pub page_end: u32,
    /// Offsets in characters (not bytes) into the document's joined block text.
    pub char_start: usize,
    pub char_end: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkParams {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for ChunkParams {
    fn default() -> Self {
        ChunkParams {
            chunk_size: DEFAULT_CHUNK_SIZE,
            overlap: DEFAULT_OVERLAP,
        }
    }
}

impl ChunkParams {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.chunk_size == 0 || self.overlap >= self.chunk_size {
            return Err(IngestError::InvalidChunkParams {
                chunk_size: self.chunk_size,
                overlap: self.overlap,
            });
        }
        Ok(())
    }

    fn stride(&self) -> usize {
        self.chunk_size - self.overlap
    }
}

/// What an extractor recovers from one document's bytes.
#[derive(Debug, Clone, Default)]
pub struct Extracted {
    pub title: Option<String>,
    pub author: Option<String>,
    pub page_count: u32,
    pub blocks: Vec<TextBlock>,
}

/// Pluggable text extraction for one source format.
pub trait BlockExtractor {
    fn extract(&self, bytes: &[u8], doc_id: &str) -> Result<Extracted, IngestError>;
}

pub struct PlaintextExtractor;

impl BlockExtractor for PlaintextExtractor {
    fn extract(&self, bytes: &[u8], doc_id: &str) -> Result<Extracted, IngestError> {
        let text = String::from_utf8_lossy(bytes);
        let blocks = paragraphs(&text)
            .into_iter()
            .enumerate()
            .map(|(order, text)| TextBlock {
                doc_id: doc_id.to_string(),
                page: 1,
                order: order as u32,
                text,
            })
            .collect();
        Ok(Extracted {
            title: None,
            author: None,
            page_count: 1,
            blocks,
        })
    }
}

pub struct JsonlBlockExtractor;

impl BlockExtractor for JsonlBlockExtractor {
    fn extract(&self, bytes: &[u8], doc_id: &str) -> Result<Extracted, IngestError> {
        let text = std::str::from_utf8(bytes).map_err(|e| IngestError::MalformedBlockRecord {
            line: line_of_byte(bytes, e.valid_up_to()),
            reason: "invalid UTF-8".into(),
        })?;
        let mut out = Extracted::default();
        let mut seen = HashSet::new();
        let mut first_record = true;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| IngestError::MalformedBlockRecord { line, reason };
            let value: Value =
                serde_json::from_str(raw).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
            let obj = value
                .as_object()
                .ok_or_else(|| malformed("record is not a JSON object".into()))?;
            let is_first = std::mem::replace(&mut first_record, false);
            if let Some(meta) = obj.get("meta") {
                if !is_first {
                    return Err(malformed("meta record must be the first line".into()));
                }
                out.title = optional_string(meta, "title").map_err(malformed)?;
                out.author = optional_string(meta, "author").map_err(malformed)?;
                continue;
            }
            let page = required_uint(obj, "page").map_err(malformed)?;
            if page == 0 {
                return Err(malformed("\"page\" must be >= 1".into()));
            }
            let order = required_uint(obj, "order").map_err(malformed)?;
            let text = obj
                .get("text")
                .ok_or_else(|| malformed("missing field \"text\"".into()))?
                .as_str()
                .ok_or_else(|| malformed("\"text\" must be a string".into()))?;
            if !seen.insert((page, order)) {
                return Err(malformed(format!("duplicate block page={page} order={order}")));
            }
            out.page_count = out.page_count.max(page);
            if text.trim().is_empty() {
                continue;
            }
            out.blocks.push(TextBlock {
                doc_id: doc_id.to_string(),
                page,
                order,
                text: text.to_string(),
            });
        }
        Ok(out)
    }
}

fn line_of_byte(bytes: &[u8], offset: usize) -> usize {
    bytes[..offset].iter().filter(|&&b| b == b'\n').count() + 1
}

fn required_uint(obj: &serde_json::Map<String, Value>, key: &str) -> Result<u32, String> {
    let v = obj.get(key).ok_or_else(|| format!("missing field {key:?}"))?;
    v.as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| format!("{key:?} must be a non-negative integer"))
}

fn optional_string(meta: &Value, key: &str) -> Result<Option<String>, String> {
    match meta.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.clone())),
        Some(_) => Err(format!("meta {key:?} must be a string")),
    }
}

#[cfg(feature = "pdf")]
pub struct PdfExtractor;

#[cfg(feature = "pdf")]
impl BlockExtractor for PdfExtractor {
    fn extract(&self, bytes: &[u8], doc_id: &str) -> Result<Extracted, IngestError> {
        let fail = |reason: String| IngestError::Extraction {
            path: doc_id.to_string(),
            reason,
        };
        let pages = pdf_extract::extract_text_from_mem_by_pages(bytes).map_err(|e| fail(e.to_string()))?;
        let (title, author) = match pdf_extract::Document::load_mem(bytes) {
            Ok(doc) => (pdf_info_string(&doc, b"Title"), pdf_info_string(&doc, b"Author")),
            Err(_) => (None, None),
        };
        let mut blocks = Vec::new();
        for (i, page_text) in pages.iter().enumerate() {
            for (order, text) in paragraphs(page_text).into_iter().enumerate() {
                blocks.push(TextBlock {
                    doc_id: doc_id.to_string(),
                    page: i as u32 + 1,
                    order: order as u32,
                    text,
                });
            }
        }
        Ok(Extracted {
            title,
            author,
            page_count: pages.len().max(1) as u32,
            blocks,
        })
    }
}

#[cfg(feature = "pdf")]
fn pdf_info_string(doc: &pdf_extract::Document, key: &[u8]) -> Option<String> {
    use pdf_extract::Object;
    let info = match doc.trailer.get(b"Info").ok()? {
        Object::Reference(id) => doc.get_object(*id).ok()?,
        other => other,
    };
    let info = info.as_dict().ok()?;
    let raw = match info.get(key).ok()? {
        Object::String(bytes, _) => bytes.clone(),
        _ => return None,
    };
    // UTF-16BE with BOM, otherwise treat as Latin-1 (close enough to PDFDocEncoding).
    let text = if raw.starts_with(&[0xFE, 0xFF]) {
        let units: Vec<u16> = raw[2..]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect();
        String::from_utf16_lossy(&units)
    } else {
        raw.iter().map(|&b| b as char).collect()
    };
    let text = text.trim().to_string();
    (!text.is_empty()).then_some(text)
}

/// Splits text into paragraphs on blank (whitespace-only) lines. Paragraphs
/// are trimmed; empty ones are dropped.
pub fn paragraphs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            flush_paragraph(&mut current, &mut out);
        } else {
            current.push(line);
        }
    }
    flush_paragraph(&mut current, &mut out);
    out
}

fn flush_paragraph(lines: &mut Vec<&str>, out: &mut Vec<String>) {
    if !lines.is_empty() {
        let para = lines.join("\n");
        let para = para.trim();
        if !para.is_empty() {
            out.push(para.to_string());
        }
        lines.clear();
    }
}

/// Derives a document id from a path: the file stem.
pub fn doc_id_for(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| path.to_string_lossy().into_owned())
}

fn extractor_for(format: SourceFormat) -> Result<Box<dyn BlockExtractor>, IngestError> {
    match format {
        SourceFormat::Plaintext => Ok(Box::new(PlaintextExtractor)),
        SourceFormat::JsonlBlocks => Ok(Box::new(JsonlBlockExtractor)),
        #[cfg(feature = "pdf")]
        SourceFormat::Pdf => Ok(Box::new(PdfExtractor)),
        #[cfg(not(feature = "pdf"))]
        SourceFormat::Pdf => Err(IngestError::UnsupportedFormat(format)),
    }
}

/// Extracts metadata and reading-ordered blocks from the file at `path`.
pub fn extract_blocks(path: &Path, format: SourceFormat) -> Result<(DocumentMeta, Vec<TextBlock>), IngestError> {
    let bytes = fs::read(path).map_err(|source| IngestError::UnreadableSource {
        path: path.to_path_buf(),
        source,
    })?;
    extract_blocks_from_bytes(&bytes, &path.to_string_lossy(), &doc_id_for(path), format)
}

/// Same as [`extract_blocks`] but over an in-memory source.
pub fn extract_blocks_from_bytes(
    bytes: &[u8],
    source_path: &str,
    doc_id: &str,
    format: SourceFormat,
) -> Result<(DocumentMeta, Vec<TextBlock>), IngestError> {
    let mut extracted = extractor_for(format)?.extract(bytes, doc_id)?;
    extracted.blocks.retain(|b| !b.text.trim().is_empty());
    if extracted.blocks.is_empty() {
        return Err(IngestError::EmptyDocument(doc_id.to_string()));
    }
    extracted.blocks.sort_by_key(|b| (b.page, b.order));
    let meta = DocumentMeta {
        doc_id: doc_id.to_string(),
        title: extracted.title,
        author: extracted.author,
        source_path: source_path.to_string(),
        page_count: extracted.page_count.max(1),
        ingested_at: Utc::now(),
    };
    Ok((meta, extracted.blocks))
}

/// Splits blocks into overlapping character windows.
///
/// Blocks are grouped per document (first-appearance order), sorted by
/// `(page, order)` and joined with `"\n"` into a text of `L` characters.
/// Window `i` covers `[i * (chunk_size - overlap), min(.. + chunk_size, L))`
/// and windows are emitted while the start is below `L`.
pub fn chunk_document(blocks: &[TextBlock], params: ChunkParams) -> Result<Vec<Chunk>, IngestError> {
    params.validate()?;
    let mut doc_order: Vec<&str> = Vec::new();
    for b in blocks {
        if !doc_order.contains(&b.doc_id.as_str()) {
            doc_order.push(&b.doc_id);
        }
    }
    let mut chunks = Vec::new();
    for doc_id in doc_order {
        let mut doc_blocks: Vec<&TextBlock> = blocks.iter().filter(|b| b.doc_id == doc_id).collect();
        doc_blocks.sort_by_key(|b| (b.page, b.order));
        chunk_one(doc_id, &doc_blocks, params, &mut chunks);
    }
    Ok(chunks)
}

struct BlockSpan {
    start: usize,
    end: usize,
    page: u32,
}

fn chunk_one(doc_id: &str, blocks: &[&TextBlock], params: ChunkParams, out: &mut Vec<Chunk>) {
    let mut text = String::new();
    let mut spans = Vec::with_capacity(blocks.len());
    let mut pos = 0usize;
    for (i, b) in blocks.iter().enumerate() {
        if i > 0 {
            text.push('\n');
            pos += 1;
        }
        let len = b.text.chars().count();
        text.push_str(&b.text);
        spans.push(BlockSpan {
            start: pos,
            end: pos + len,
            page: b.page,
        });
        pos += len;
    }
    let total = pos;
    // Byte offset of every char boundary, including the end.
    let boundaries: Vec<usize> = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()))
        .collect();

    let mut start = 0usize;
    let mut i = 0usize;
    while start < total {
        let end = (start + params.chunk_size).min(total);
        let (page_start, page_end) = page_span(&spans, start, end);
        out.push(Chunk {
            chunk_id: format!("{doc_id}#{i}"),
            doc_id: doc_id.to_string(),
            page_start,
            page_end,
            char_start: start,
            char_end: end,
            text: text[boundaries[start]..boundaries[end]].to_string(),
        });
        start += params.stride();
        i += 1;
    }
}

fn page_span(spans: &[BlockSpan], start: usize, end: usize) -> (u32, u32) {
    let mut pages = spans
        .iter()
        .filter(|s| s.start < end && s.end > start)
        .map(|s| s.page);
    match pages.next() {
        Some(first) => {
            let last = pages.last().unwrap_or(first);
            (first, last)
        }
        None => {
            // Window lies entirely on a separator; attribute it to the block before.
            let page = spans
                .iter()
                .rev()
                .find(|s| s.end <= start)
                .or(spans.first())
                .map_or(1, |s| s.page);
            (page, page)
        }
    }
}

/// Ingests a file or every matching file in a directory (sorted by name).
pub fn ingest_path(
    path: &Path,
    format: SourceFormat,
    params: ChunkParams,
) -> Result<(Vec<DocumentMeta>, Vec<Chunk>), IngestError> {
    params.validate()?;
    let files = if path.is_dir() {
        let entries = fs::read_dir(path).map_err(|source| IngestError::UnreadableSource {
            path: path.to_path_buf(),
            source,
        })?;
        let mut files: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|ext| ext == format.extension()))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };

    let mut metas = Vec::with_capacity(files.len());
    let mut chunks = Vec::new();
    let mut ids = HashSet::new();
    for file in files {
        let (meta, blocks) = extract_blocks(&file, format)?;
        if !ids.insert(meta.doc_id.clone()) {
            return Err(IngestError::DuplicateDocId(meta.doc_id));
        }
        chunks.extend(chunk_document(&blocks, params)?);
        metas.push(meta);
    }
    Ok((metas, chunks))
}
