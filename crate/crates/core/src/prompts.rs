//! The question-answering prompt grid.
//!
//! Nine variants: three sentence limits (none, 2, 3) crossed with three
//! generation strategies (guardrails only, compare-4 with guardrails,
//! compare-4 only). Ids are `prompt_<s><l>` where `s` picks the strategy
//! (`0`, `1`, `2`) and `l` picks the limit (`a`, `b`, `c`).
//!
//! Prompts are zero-shot: instructions, retrieved context and the question,
//! no worked examples.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::index::RetrievalResult;

pub const DEFAULT_VARIANT: &str = "prompt_0a";

/// Candidates generated by compare strategies.
pub const COMPARE_CANDIDATES: usize = 4;

pub const DEFAULT_PREAMBLE: &str = "You are a drug information assistant for healthcare workers. \
Answer the clinician's question using the formulary excerpts supplied in the user message. \
Cite the excerpts you rely on by their [SOURCE n] tag.";

pub const DEFAULT_GUARDRAILS: [&str; 4] = [
    "Do not speculate: if the excerpts do not contain the answer, say that the information is not available.",
    "Do not use or cite unverified sources; rely only on the formulary excerpts provided.",
    "End with a clear disclaimer that this information does not replace the judgement of a qualified pharmacist or physician.",
    "Answer only from the provided context and do not add facts that are not in it.",
];

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("unknown prompt variant {0:?}")]
    UnknownVariant(String),
    #[error("invalid prompt config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    GuardrailsOnly,
    Compare4AndGuardrails,
    Compare4Only,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [
        Strategy::GuardrailsOnly,
        Strategy::Compare4AndGuardrails,
        Strategy::Compare4Only,
    ];

    pub fn uses_guardrails(self) -> bool {
        !matches!(self, Strategy::Compare4Only)
    }

    pub fn compares(self) -> bool {
        !matches!(self, Strategy::GuardrailsOnly)
    }

    fn digit(self) -> char {
        match self {
            Strategy::GuardrailsOnly => '0',
            Strategy::Compare4AndGuardrails => '1',
            Strategy::Compare4Only => '2',
        }
    }
}

/// Maximum sentences requested from the model; `None` means unlimited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "Option<u8>", try_from = "Option<u8>")]
pub enum SentenceLimit {
    None,
    Two,
    Three,
}

impl SentenceLimit {
    pub const ALL: [SentenceLimit; 3] = [SentenceLimit::None, SentenceLimit::Two, SentenceLimit::Three];

    pub fn max_sentences(self) -> Option<usize> {
        match self {
            SentenceLimit::None => None,
            SentenceLimit::Two => Some(2),
            SentenceLimit::Three => Some(3),
        }
    }

    fn letter(self) -> char {
        match self {
            SentenceLimit::None => 'a',
            SentenceLimit::Two => 'b',
            SentenceLimit::Three => 'c',
        }
    }
}

impl From<SentenceLimit> for Option<u8> {
    fn from(l: SentenceLimit) -> Self {
        l.max_sentences().map(|n| n as u8)
    }
}

impl TryFrom<Option<u8>> for SentenceLimit {
    type Error = String;

    fn try_from(v: Option<u8>) -> Result<Self, Self::Error> {
        match v {
            None => Ok(SentenceLimit::None),
            Some(2) => Ok(SentenceLimit::Two),
            Some(3) => Ok(SentenceLimit::Three),
            Some(n) => Err(format!("unsupported sentence limit {n}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptVariant {
    pub variant_id: String,
    pub sentence_limit: SentenceLimit,
    pub strategy: Strategy,
    pub n_candidates: usize,
}

impl PromptVariant {
    pub fn new(strategy: Strategy, sentence_limit: SentenceLimit) -> Self {
        PromptVariant {
            variant_id: format!("prompt_{}{}", strategy.digit(), sentence_limit.letter()),
            sentence_limit,
            strategy,
            n_candidates: if strategy.compares() { COMPARE_CANDIDATES } else { 1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardrailSet {
    pub clauses: Vec<String>,
}

impl Default for GuardrailSet {
    fn default() -> Self {
        GuardrailSet {
            clauses: DEFAULT_GUARDRAILS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Overridable prompt texts (the `[prompts]` table of the config file).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptConfig {
    pub preamble: String,
    pub guardrails: Vec<String>,
    /// Extra system text appended for a given variant id.
    pub variant_notes: BTreeMap<String, String>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            preamble: DEFAULT_PREAMBLE.to_string(),
            guardrails: GuardrailSet::default().clauses,
            variant_notes: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone)]
pub struct PromptRegistry {
    variants: Vec<PromptVariant>,
    preamble: String,
    guardrails: GuardrailSet,
    notes: BTreeMap<String, String>,
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::new(PromptConfig::default()).expect("default prompt config is valid")
    }
}

impl PromptRegistry {
    pub fn new(config: PromptConfig) -> Result<Self, PromptError> {
        let variants = list_variants();
        if config.guardrails.iter().any(|c| c.trim().is_empty()) {
            return Err(PromptError::InvalidConfig("guardrail clauses must be non-empty".into()));
        }
        if config.guardrails.is_empty() {
            return Err(PromptError::InvalidConfig("at least one guardrail clause is required".into()));
        }
        if let Some(id) = config.variant_notes.keys().find(|id| !variants.iter().any(|v| &v.variant_id == *id)) {
            return Err(PromptError::UnknownVariant(id.clone()));
        }
        Ok(PromptRegistry {
            variants,
            preamble: config.preamble,
            guardrails: GuardrailSet {
                clauses: config.guardrails,
            },
            notes: config.variant_notes,
        })
    }

    pub fn variants(&self) -> &[PromptVariant] {
        &self.variants
    }

    pub fn guardrails(&self) -> &GuardrailSet {
        &self.guardrails
    }

    pub fn get(&self, variant_id: &str) -> Result<&PromptVariant, PromptError> {
        self.variants
            .iter()
            .find(|v| v.variant_id == variant_id)
            .ok_or_else(|| PromptError::UnknownVariant(variant_id.to_string()))
    }

    /// Builds the system and user messages for one question.
    ///
    /// Each context chunk is tagged `[SOURCE i: <doc_id> p.<page_start>]` and
    /// closed with `[/SOURCE i]`; its text is embedded verbatim.
    pub fn render_qa_prompt(
        &self,
        variant: &PromptVariant,
        query: &str,
        context: &[RetrievalResult],
    ) -> Result<RenderedPrompt, PromptError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(PromptError::EmptyQuery);
        }
        let mut system = self.preamble.clone();
        if let Some(n) = variant.sentence_limit.max_sentences() {
            let _ = write!(system, "\nAnswer in at most {n} sentences.");
        }
        if variant.strategy.uses_guardrails() {
            system.push_str("\nRules:");
            for clause in &self.guardrails.clauses {
                let _ = write!(system, "\n- {clause}");
            }
        }
        if let Some(note) = self.notes.get(&variant.variant_id) {
            let _ = write!(system, "\n{note}");
        }

        let mut user = String::from("Formulary excerpts:\n");
        for (i, c) in context.iter().enumerate() {
            let n = i + 1;
            let _ = write!(
                user,
                "\n[SOURCE {n}: {} p.{}]\n{}\n[/SOURCE {n}]\n",
                c.doc_id(),
                c.page_start(),
                c.text()
            );
        }
        let _ = write!(user, "\nQuestion: {query}");
        Ok(RenderedPrompt { system, user })
    }
}

/// The full 3x3 grid, ordered by strategy then limit.
pub fn list_variants() -> Vec<PromptVariant> {
    Strategy::ALL
        .iter()
        .flat_map(|&s| SentenceLimit::ALL.iter().map(move |&l| PromptVariant::new(s, l)))
        .collect()
}

/// Counts sentences as maximal runs ending in `.`, `!` or `?` followed by
/// whitespace or end of text. A trailing run without terminal punctuation
/// counts as one more. Abbreviations such as "e.g." over-count.
pub fn count_sentences(text: &str) -> usize {
    let mut count = 0;
    let mut in_sentence = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if c.is_whitespace() {
            continue;
        }
        in_sentence = true;
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            count += 1;
            in_sentence = false;
        }
    }
    count + usize::from(in_sentence)
}
