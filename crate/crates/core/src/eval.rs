//! Evaluation against reference answers.
//!
//! Each in-corpus item is scored by the cosine similarity between the
//! sentence embeddings of the system answer and the reference answer,
//! reported as a percentage. Out-of-corpus probes have no reference; they
//! count towards abstention accuracy instead and are excluded from the
//! similarity means. An in-corpus item the engine abstains on scores 0.
//! Items whose engine call fails are recorded with their error and left out
//! of the means.

use std::collections::{BTreeMap, HashSet};
use std::fmt::{self, Write as _};
use std::path::Path;

use futures::StreamExt;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbedError, Embedder};
use crate::engine::QaEngine;
use crate::feedback::{FeedbackEvent, SurveyResponse};
use crate::prompts::list_variants;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot read dataset: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed eval item on line {line}: {reason}")]
    MalformedItem { line: usize, reason: String },
    #[error("invalid category {category:?} on line {line}")]
    InvalidCategory { line: usize, category: String },
    #[error("text to score is empty")]
    EmptyText,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("unknown prompt variant {0:?}")]
    UnknownVariant(String),
    #[error("survey has no responses")]
    EmptySurvey,
    #[error("respondent {respondent:?} gave {question} a score outside 1..=5")]
    OutOfRangeScore { respondent: String, question: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    DrugEffects,
    Dosage,
    SideEffects,
    SpecialPopulations,
    OutOfCorpus,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::DrugEffects,
        Category::Dosage,
        Category::SideEffects,
        Category::SpecialPopulations,
        Category::OutOfCorpus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::DrugEffects => "drug_effects",
            Category::Dosage => "dosage",
            Category::SideEffects => "side_effects",
            Category::SpecialPopulations => "special_populations",
            Category::OutOfCorpus => "out_of_corpus",
        }
    }

    fn parse(s: &str) -> Option<Category> {
        Category::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub query: String,
    pub reference_answer: String,
    pub category: Category,
}

#[derive(Deserialize)]
struct RawItem {
    item_id: String,
    query: String,
    #[serde(default)]
    reference_answer: String,
    category: String,
}

/// Parses an evaluation dataset (JSONL, one item per line).
pub fn parse_eval_dataset(text: &str) -> Result<Vec<EvalItem>, EvalError> {
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| EvalError::MalformedItem { line, reason };
        let item: RawItem = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
        let category = Category::parse(&item.category).ok_or_else(|| EvalError::InvalidCategory {
            line,
            category: item.category.clone(),
        })?;
        if item.query.trim().is_empty() {
            return Err(malformed("query is empty".into()));
        }
        let has_reference = !item.reference_answer.trim().is_empty();
        match (category, has_reference) {
            (Category::OutOfCorpus, true) => {
                return Err(malformed("out_of_corpus items must not have a reference answer".into()))
            }
            (c, false) if c != Category::OutOfCorpus => {
                return Err(malformed(format!("{c} items need a reference answer")))
            }
            _ => {}
        }
        if !ids.insert(item.item_id.clone()) {
            return Err(malformed(format!("duplicate item_id {:?}", item.item_id)));
        }
        items.push(EvalItem {
            item_id: item.item_id,
            query: item.query,
            reference_answer: item.reference_answer,
            category,
        });
    }
    Ok(items)
}

pub fn load_eval_dataset(path: &Path) -> Result<Vec<EvalItem>, EvalError> {
    parse_eval_dataset(&std::fs::read_to_string(path)?)
}

/// Cosine similarity of the two texts' unit sentence embeddings, in [-1, 1].
pub async fn score_pair(system_answer: &str, reference_answer: &str, embedder: &dyn Embedder) -> Result<f64, EvalError> {
    if system_answer.trim().is_empty() || reference_answer.trim().is_empty() {
        return Err(EvalError::EmptyText);
    }
    let v = embedder
        .embed_batch(&[system_answer.to_string(), reference_answer.to_string()])
        .await?;
    Ok(v[0].cosine(&v[1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub variant_id: String,
    pub item_id: String,
    pub category: Category,
    /// Similarity x 100; `None` for out-of-corpus items and failed items.
    pub similarity_pct: Option<f64>,
    pub abstained: bool,
    /// Out-of-corpus items only: did the engine abstain?
    pub correct_abstention: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer_id: String,
    pub per_variant: BTreeMap<String, Option<f64>>,
    pub per_variant_category: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    /// Over every (variant, out-of-corpus item) pair; `None` without probes.
    pub abstention_accuracy: Option<f64>,
    pub per_variant_abstention: BTreeMap<String, Option<f64>>,
    pub failures: usize,
    pub item_scores: Vec<ItemScore>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    /// Engine calls in flight at once.
    pub parallelism: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { parallelism: 4 }
    }
}

/// Runs every item against every variant and aggregates the scores.
pub async fn run_eval(
    items: &[EvalItem],
    variant_ids: &[String],
    engine: &dyn QaEngine,
    embedder: &dyn Embedder,
    options: EvalOptions,
) -> Result<EvalReport, EvalError> {
    let known = list_variants();
    if let Some(bad) = variant_ids.iter().find(|v| !known.iter().any(|k| &k.variant_id == *v)) {
        return Err(EvalError::UnknownVariant(bad.clone()));
    }
    let jobs: Vec<(&String, &EvalItem)> = variant_ids
        .iter()
        .flat_map(|v| items.iter().map(move |item| (v, item)))
        .collect();
    let item_scores: Vec<ItemScore> = futures::stream::iter(jobs)
        .map(|(variant_id, item)| score_item(variant_id, item, engine, embedder))
        .buffered(options.parallelism.max(1))
        .collect()
        .await;
    Ok(aggregate(embedder.provider_id(), variant_ids, item_scores))
}

async fn score_item(variant_id: &str, item: &EvalItem, engine: &dyn QaEngine, embedder: &dyn Embedder) -> ItemScore {
    let mut score = ItemScore {
        variant_id: variant_id.to_string(),
        item_id: item.item_id.clone(),
        category: item.category,
        similarity_pct: None,
        abstained: false,
        correct_abstention: None,
        error: None,
    };
    let answer = match engine.answer(&item.query, variant_id).await {
        Ok(a) => a,
        Err(e) => {
            score.error = Some(e.to_string());
            return score;
        }
    };
    score.abstained = answer.abstained;
    if item.category == Category::OutOfCorpus {
        score.correct_abstention = Some(answer.abstained);
    } else if answer.abstained {
        score.similarity_pct = Some(0.0);
    } else {
        match score_pair(&answer.answer_text, &item.reference_answer, embedder).await {
            Ok(s) => score.similarity_pct = Some(s * 100.0),
            Err(e) => score.error = Some(e.to_string()),
        }
    }
    score
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn fraction(flags: impl Iterator<Item = bool>) -> Option<f64> {
    mean(flags.map(|b| if b { 1.0 } else { 0.0 }))
}

/// Builds the report from per-item scores.
pub fn aggregate(scorer_id: &str, variant_ids: &[String], item_scores: Vec<ItemScore>) -> EvalReport {
    let mut per_variant = BTreeMap::new();
    let mut per_variant_category = BTreeMap::new();
    let mut per_variant_abstention = BTreeMap::new();
    for v in variant_ids {
        let mine = || item_scores.iter().filter(move |s| &s.variant_id == v);
        per_variant.insert(v.clone(), mean(mine().filter_map(|s| s.similarity_pct)));
        let cats: BTreeMap<String, Option<f64>> = Category::ALL
            .into_iter()
            .filter(|&c| c != Category::OutOfCorpus && mine().any(|s| s.category == c))
            .map(|c| {
                let m = mean(mine().filter(|s| s.category == c).filter_map(|s| s.similarity_pct));
                (c.as_str().to_string(), m)
            })
            .collect();
        per_variant_category.insert(v.clone(), cats);
        per_variant_abstention.insert(v.clone(), fraction(mine().filter_map(|s| s.correct_abstention)));
    }
    EvalReport {
        scorer_id: scorer_id.to_string(),
        per_variant,
        per_variant_category,
        abstention_accuracy: fraction(item_scores.iter().filter_map(|s| s.correct_abstention)),
        per_variant_abstention,
        failures: item_scores.iter().filter(|s| s.error.is_some()).count(),
        item_scores,
        notes: vec![
            "similarity means exclude out_of_corpus items, which are scored by abstention only".into(),
            "in-corpus items the engine abstained on score 0; failed items are excluded".into(),
        ],
    }
}

fn fmt_pct(x: Option<f64>) -> String {
    x.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl EvalReport {
    /// Plain-text table: one mean similarity per variant, best first, with
    /// the per-category breakdown alongside.
    pub fn render_table(&self) -> String {
        let cats: Vec<&str> = Category::ALL[..4].iter().map(|c| c.as_str()).collect();
        let mut rows: Vec<(&String, Option<f64>)> = self.per_variant.iter().map(|(k, v)| (k, *v)).collect();
        rows.sort_by(|a, b| match (a.1, b.1) {
            (Some(x), Some(y)) => y.total_cmp(&x).then_with(|| a.0.cmp(b.0)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.0.cmp(b.0),
        });
        let mut out = format!("Mean similarity to reference answers (%), scorer {}\n", self.scorer_id);
        let _ = write!(out, "{:<12}{:>8}", "variant", "mean");
        for c in &cats {
            let _ = write!(out, "{:>21}", c);
        }
        out.push('\n');
        for (variant, m) in rows {
            let _ = write!(out, "{variant:<12}{:>8}", fmt_pct(m));
            let by_cat = self.per_variant_category.get(variant);
            for c in &cats {
                let v = by_cat.and_then(|m| m.get(*c)).copied().flatten();
                let _ = write!(out, "{:>21}", fmt_pct(v));
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "abstention accuracy on out-of-corpus probes: {}",
            self.abstention_accuracy
                .map_or_else(|| "n/a".to_string(), |a| format!("{:.2}%", a * 100.0))
        );
        if self.failures > 0 {
            let _ = writeln!(out, "failed items: {}", self.failures);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSurvey {
    pub responses: Vec<SurveyResponse>,
}

impl FeedbackSurvey {
    /// Survey rows found in feedback events; empty respondent ids fall back
    /// to the event id.
    pub fn from_events(events: &[FeedbackEvent]) -> Self {
        FeedbackSurvey {
            responses: events
                .iter()
                .filter_map(|e| {
                    e.survey.clone().map(|mut s| {
                        if s.respondent_id.is_empty() {
                            s.respondent_id = e.event_id.clone();
                        }
                        s
                    })
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSummary {
    pub responses: usize,
    pub relevance: f64,
    pub accuracy: f64,
    pub construction: f64,
    pub sources: f64,
}

/// `sum / n` rounded half-up to two decimals, computed exactly in integers.
pub fn mean_half_up_2dp(sum: u64, n: u64) -> f64 {
    assert!(n > 0);
    let hundredths = (sum * 200 + n) / (2 * n);
    hundredths as f64 / 100.0
}

/// Per-question means of a 1-5 survey, rounded half-up to 2 decimals.
pub fn aggregate_feedback(survey: &FeedbackSurvey) -> Result<FeedbackSummary, EvalError> {
    if survey.responses.is_empty() {
        return Err(EvalError::EmptySurvey);
    }
    let mut sums = [0u64; 4];
    for r in &survey.responses {
        if let Some(q) = r.out_of_range() {
            return Err(EvalError::OutOfRangeScore {
                respondent: r.respondent_id.clone(),
                question: q.to_string(),
            });
        }
        for (sum, (_, s)) in sums.iter_mut().zip(r.scores()) {
            *sum += u64::from(s);
        }
    }
    let n = survey.responses.len() as u64;
    Ok(FeedbackSummary {
        responses: survey.responses.len(),
        relevance: mean_half_up_2dp(sums[0], n),
        accuracy: mean_half_up_2dp(sums[1], n),
        construction: mean_half_up_2dp(sums[2], n),
        sources: mean_half_up_2dp(sums[3], n),
    })
}

impl FeedbackSummary {
    /// Question / average-score table.
    pub fn render_table(&self) -> String {
        let rows = [
            ("Output is relevant to the question", self.relevance),
            ("Output is accurate", self.accuracy),
            ("Output is usefully constructed", self.construction),
            ("Cited source documents are relevant", self.sources),
        ];
        let mut out = format!("{:<40}{:>18}\n", "Evaluation question", "Average score (/5)");
        for (q, s) in rows {
            let _ = writeln!(out, "{q:<40}{s:>18.2}");
        }
        let _ = writeln!(out, "responses: {}", self.responses);
        out
    }
}
