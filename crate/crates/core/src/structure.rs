//! LLM-guided restructuring of raw chunk text into drug monograph records.
//!
//! The model is asked to answer in a line-labeled format:
//!
//! ```text
//! NAME: Amoxicillin
//! INDICATIONS:
//! - Acute otitis media
//! CONTRAINDICATIONS:
//! - Hypersensitivity to penicillins
//! DOSAGES:
//! - Adults: 500 mg orally every 8 hours
//! SIDE_EFFECTS:
//! - Diarrhoea
//! ```
//!
//! The structured record file stores the same format plus a `SOURCES:` list
//! of chunk ids, one record per block, blocks separated by a `---` line.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::http::ProviderError;
use crate::ingest::Chunk;
use crate::llm::{ChatMessage, ChatProvider, ChatRequest};

pub const CHUNK_OPEN: &str = "<<<CHUNK";
pub const CHUNK_CLOSE: &str = "CHUNK>>>";
pub const RECORD_SEPARATOR: &str = "---";
pub const DEFAULT_BATCH_SIZE: usize = 8;

const NAME: &str = "NAME";
const SOURCES: &str = "SOURCES";
const SECTION_LABELS: [&str; 4] = ["INDICATIONS", "CONTRAINDICATIONS", "DOSAGES", "SIDE_EFFECTS"];

#[derive(Debug, thiserror::Error)]
pub enum StructureError {
    #[error("chunk {0} has no text")]
    EmptyChunk(String),
    #[error("model output has no NAME line")]
    MissingName,
    #[error("record {0:?} has no indications, contraindications, dosages or side effects")]
    EmptyRecord(String),
    #[error("record {0:?} has no source chunk ids")]
    MissingProvenance(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("structured record file: {0}")]
    Io(#[from] std::io::Error),
    #[error("structured record file, record {record}: {reason}")]
    MalformedFile { record: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrugRecord {
    pub name: String,
    pub indications: Vec<String>,
    pub contraindications: Vec<String>,
    pub dosages: Vec<String>,
    pub side_effects: Vec<String>,
    pub source_chunk_ids: Vec<String>,
}

impl DrugRecord {
    fn sections(&self) -> [(&'static str, &Vec<String>); 4] {
        [
            (SECTION_LABELS[0], &self.indications),
            (SECTION_LABELS[1], &self.contraindications),
            (SECTION_LABELS[2], &self.dosages),
            (SECTION_LABELS[3], &self.side_effects),
        ]
    }

    fn section_mut(&mut self, label: &str) -> Option<&mut Vec<String>> {
        match label {
            "INDICATIONS" => Some(&mut self.indications),
            "CONTRAINDICATIONS" => Some(&mut self.contraindications),
            "DOSAGES" => Some(&mut self.dosages),
            "SIDE_EFFECTS" => Some(&mut self.side_effects),
            _ => None,
        }
    }

    /// The labeled-section text, without provenance. This is what gets embedded.
    pub fn to_labeled_text(&self) -> String {
        let mut out = format!("{NAME}: {}\n", self.name);
        for (label, items) in self.sections() {
            out.push_str(label);
            out.push_str(":\n");
            for item in items {
                out.push_str("- ");
                out.push_str(item);
                out.push('\n');
            }
        }
        out.pop();
        out
    }

    /// Labeled text followed by the `SOURCES:` list, as stored in record files.
    pub fn to_file_text(&self) -> String {
        let mut out = self.to_labeled_text();
        out.push_str("\nSOURCES:");
        for id in &self.source_chunk_ids {
            out.push_str("\n- ");
            out.push_str(id);
        }
        out
    }

    pub fn validate(&self) -> Result<(), StructureError> {
        if self.name.trim().is_empty() {
            return Err(StructureError::MissingName);
        }
        if self.sections().iter().all(|(_, items)| items.is_empty()) {
            return Err(StructureError::EmptyRecord(self.name.clone()));
        }
        if self.source_chunk_ids.is_empty() {
            return Err(StructureError::MissingProvenance(self.name.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringPrompt {
    pub template_id: String,
    pub system_text: String,
    pub schema_description: String,
}

impl Default for StructuringPrompt {
    fn default() -> Self {
        StructuringPrompt {
            template_id: "drug-monograph-v1".into(),
            system_text: "You organize drug formulary text into structured monograph records. \
Use only information present in the source text; do not add, infer or correct facts."
                .into(),
            schema_description: "Answer ONLY in the following format, with no other text:\n\
NAME: <drug name on one line>\n\
INDICATIONS:\n\
- <one indication per line>\n\
CONTRAINDICATIONS:\n\
- <one contraindication per line>\n\
DOSAGES:\n\
- <one dosage instruction per line>\n\
SIDE_EFFECTS:\n\
- <one side effect per line>\n\
Leave a section without items when the text does not cover it. \
If the text does not describe a drug, answer with the single line NONE."
                .into(),
        }
    }
}

impl StructuringPrompt {
    /// Full prompt for one chunk; the chunk text is embedded verbatim between
    /// the chunk markers.
    pub fn render(&self, chunk: &Chunk) -> Result<String, StructureError> {
        if chunk.text.trim().is_empty() {
            return Err(StructureError::EmptyChunk(chunk.chunk_id.clone()));
        }
        Ok(format!(
            "{}\n\n{}\n\nSource text:\n{CHUNK_OPEN}\n{}\n{CHUNK_CLOSE}",
            self.system_text, self.schema_description, chunk.text
        ))
    }
}

/// Renders the default structuring prompt for `chunk`.
pub fn render_structuring_prompt(chunk: &Chunk) -> Result<String, StructureError> {
    StructuringPrompt::default().render(chunk)
}

/// A parsed record plus the non-fatal oddities found on the way.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Parsed {
    pub record: DrugRecord,
    pub warnings: Vec<String>,
}

fn split_label(line: &str) -> Option<(&str, &str)> {
    let (label, rest) = line.trim_start().split_once(':')?;
    let label = label.trim_end();
    let is_label = !label.is_empty()
        && label.starts_with(|c: char| c.is_ascii_uppercase())
        && label.chars().all(|c| c.is_ascii_uppercase() || c == '_');
    is_label.then(|| (label, rest.trim()))
}

fn bullet(line: &str) -> Option<&str> {
    let t = line.trim_start();
    t.strip_prefix("- ")
        .or_else(|| t.strip_prefix("* "))
        .or_else(|| (t == "-" || t == "*").then_some(""))
}

fn parse_labeled(text: &str, accept_sources: bool) -> Result<Parsed, StructureError> {
    let mut record = DrugRecord {
        name: String::new(),
        indications: vec![],
        contraindications: vec![],
        dosages: vec![],
        side_effects: vec![],
        source_chunk_ids: vec![],
    };
    let mut warnings = Vec::new();
    let mut seen_name = false;
    // None: items are discarded (before any section or under an unknown label).
    let mut current: Option<&'static str> = None;

    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(item) = bullet(line) {
            let item = item.trim();
            match current {
                Some(_) if item.is_empty() => {}
                Some(SOURCES) => record.source_chunk_ids.push(item.to_string()),
                Some(label) => record.section_mut(label).expect("known section").push(item.to_string()),
                None => {}
            }
            continue;
        }
        let Some((label, rest)) = split_label(line) else {
            warnings.push(format!("line {}: ignored text outside a list item", i + 1));
            continue;
        };
        if label == NAME {
            if seen_name {
                warnings.push(format!("line {}: repeated NAME ignored", i + 1));
            } else {
                record.name = rest.to_string();
                seen_name = true;
            }
            current = None;
        } else if let Some(&known) = SECTION_LABELS.iter().find(|&&l| l == label) {
            current = Some(known);
            if !rest.is_empty() {
                record.section_mut(known).expect("known section").push(rest.to_string());
            }
        } else if accept_sources && label == SOURCES {
            current = Some(SOURCES);
            if !rest.is_empty() {
                record.source_chunk_ids.push(rest.to_string());
            }
        } else {
            warnings.push(format!("line {}: unknown label {label:?} ignored", i + 1));
            current = None;
        }
    }

    if record.name.is_empty() {
        return Err(StructureError::MissingName);
    }
    if record.sections().iter().all(|(_, items)| items.is_empty()) {
        return Err(StructureError::EmptyRecord(record.name));
    }
    Ok(Parsed { record, warnings })
}

/// Parses model output in the labeled-section format, keeping the warnings.
pub fn parse_with_warnings(model_text: &str, source_chunk_ids: &[String]) -> Result<Parsed, StructureError> {
    let mut parsed = parse_labeled(model_text, false)?;
    parsed.record.source_chunk_ids = source_chunk_ids.to_vec();
    parsed.record.validate()?;
    Ok(parsed)
}

/// Parses model output in the labeled-section format. Unknown labels are
/// logged and skipped.
pub fn parse_structured_output(model_text: &str, source_chunk_ids: &[String]) -> Result<DrugRecord, StructureError> {
    let parsed = parse_with_warnings(model_text, source_chunk_ids)?;
    for w in &parsed.warnings {
        log::warn!("{w}");
    }
    Ok(parsed.record)
}

/// Append-only writer for the structured record file.
pub struct RecordWriter {
    out: BufWriter<File>,
}

impl RecordWriter {
    pub fn append_to(path: &Path) -> Result<Self, StructureError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(RecordWriter {
            out: BufWriter::new(file),
        })
    }

    pub fn append(&mut self, record: &DrugRecord) -> Result<(), StructureError> {
        writeln!(self.out, "{}\n{RECORD_SEPARATOR}", record.to_file_text())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Parses a structured record file.
pub fn parse_record_file(text: &str) -> Result<Vec<DrugRecord>, StructureError> {
    let mut blocks = vec![String::new()];
    for line in text.lines() {
        if line.trim_end() == RECORD_SEPARATOR {
            blocks.push(String::new());
        } else {
            let b = blocks.last_mut().expect("non-empty");
            b.push_str(line);
            b.push('\n');
        }
    }
    blocks
        .iter()
        .filter(|b| !b.trim().is_empty())
        .enumerate()
        .map(|(i, b)| {
            let malformed = |e: StructureError| StructureError::MalformedFile {
                record: i + 1,
                reason: e.to_string(),
            };
            let parsed = parse_labeled(b, true).map_err(malformed)?;
            parsed.record.validate().map_err(malformed)?;
            Ok(parsed.record)
        })
        .collect()
}

pub fn read_record_file(path: &Path) -> Result<Vec<DrugRecord>, StructureError> {
    parse_record_file(&std::fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureOptions {
    /// Requests in flight at once.
    pub batch_size: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for StructureOptions {
    fn default() -> Self {
        StructureOptions {
            batch_size: DEFAULT_BATCH_SIZE,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

#[derive(Debug, Default)]
pub struct StructureOutcome {
    pub records: Vec<DrugRecord>,
    /// `(chunk_id, reason)` for every chunk whose output did not parse.
    pub skipped: Vec<(String, String)>,
}

/// Sends every chunk through the structuring prompt and appends each parsed
/// record to `writer` in chunk order. Unparseable outputs are logged and
/// skipped; a provider failure aborts the run.
pub async fn structure_corpus(
    chunks: &[Chunk],
    llm: &dyn ChatProvider,
    options: StructureOptions,
    mut writer: Option<&mut RecordWriter>,
) -> Result<StructureOutcome, StructureError> {
    let template = StructuringPrompt::default();
    let mut outcome = StructureOutcome::default();
    let mut stream = futures::stream::iter(chunks.iter().filter(|c| !c.text.trim().is_empty()))
        .map(|chunk| {
            let template = &template;
            async move {
                let prompt = template.render(chunk)?;
                let request = ChatRequest {
                    messages: vec![ChatMessage::user(prompt)],
                    temperature: options.temperature,
                    max_tokens: options.max_tokens,
                };
                let text = llm.complete(&request).await?;
                Ok::<_, StructureError>((chunk, text))
            }
        })
        .buffered(options.batch_size.max(1));

    while let Some(result) = stream.next().await {
        let (chunk, text) = result?;
        match parse_with_warnings(&text, std::slice::from_ref(&chunk.chunk_id)) {
            Ok(parsed) => {
                for w in &parsed.warnings {
                    log::warn!("{}: {w}", chunk.chunk_id);
                }
                if let Some(w) = writer.as_deref_mut() {
                    w.append(&parsed.record)?;
                }
                outcome.records.push(parsed.record);
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", chunk.chunk_id);
                outcome.skipped.push((chunk.chunk_id.clone(), e.to_string()));
            }
        }
    }
    Ok(outcome)
}
