//! Query orchestration: embed, retrieve, render, generate, select or abstain.

use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, EmbedError, Embedder};
use crate::http::ProviderError;
use crate::index::{IndexError, RetrievalResult, SharedIndex, DEFAULT_K, DEFAULT_THRESHOLD};
use crate::llm::{ChatMessage, ChatProvider, ChatRequest, LlmProviderConfig};
use crate::prompts::{count_sentences, PromptError, PromptRegistry, PromptVariant};

pub const DEFAULT_ABSTENTION_MESSAGE: &str =
    "I could not find this in the provided formulary corpus. Please consult a pharmacist.";

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("unknown prompt variant {0:?}")]
    UnknownVariant(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("all {attempted} candidate generations failed; last error: {last_error}")]
    AllCandidatesFailed { attempted: usize, last_error: ProviderError },
    #[error(transparent)]
    Prompt(PromptError),
}

impl From<PromptError> for EngineError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::EmptyQuery => EngineError::EmptyQuery,
            PromptError::UnknownVariant(v) => EngineError::UnknownVariant(v),
            other => EngineError::Prompt(other),
        }
    }
}

impl EngineError {
    /// True when an upstream model provider, not the request, is at fault.
    pub fn is_provider_failure(&self) -> bool {
        matches!(
            self,
            EngineError::AllCandidatesFailed { .. } | EngineError::Embed(EmbedError::Provider(_))
        )
    }

    /// True when the caller's input was invalid.
    pub fn is_client_error(&self) -> bool {
        matches!(self, EngineError::EmptyQuery | EngineError::UnknownVariant(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub k: usize,
    pub threshold: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        RetrievalParams {
            k: DEFAULT_K,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl RetrievalParams {
    /// Forces `k >= 1` and `0 <= threshold <= 1`.
    pub fn clamped(self) -> Self {
        RetrievalParams {
            k: self.k.max(1),
            threshold: if self.threshold.is_nan() { DEFAULT_THRESHOLD } else { self.threshold.clamp(0.0, 1.0) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub retrieval: RetrievalParams,
    pub abstention_message: String,
    pub default_variant: String,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            retrieval: RetrievalParams::default(),
            abstention_message: DEFAULT_ABSTENTION_MESSAGE.to_string(),
            default_variant: crate::prompts::DEFAULT_VARIANT.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub doc_id: String,
    pub page_start: u32,
    pub page_end: u32,
    pub chunk_id: String,
    pub score: f64,
}

impl From<&RetrievalResult> for Source {
    fn from(r: &RetrievalResult) -> Self {
        Source {
            doc_id: r.doc_id().to_string(),
            page_start: r.page_start(),
            page_end: r.page_end(),
            chunk_id: r.chunk_id().to_string(),
            score: r.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub answer_text: String,
    pub abstained: bool,
    pub sources: Vec<Source>,
    pub variant_id: String,
    pub candidates_generated: usize,
    pub sentence_count: usize,
    pub limit_violated: bool,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub text: String,
    /// Mean cosine of each candidate to the context; `None` when there was
    /// only one candidate and nothing was scored.
    pub grounding_scores: Option<Vec<f64>>,
}

/// Anything that can answer a query with a given prompt variant.
#[async_trait]
pub trait QaEngine: Send + Sync {
    async fn answer(&self, query: &str, variant_id: &str) -> Result<Answer, EngineError>;
}

pub struct RagEngine {
    embedder: Arc<dyn Embedder>,
    index: SharedIndex,
    llm: Arc<dyn ChatProvider>,
    registry: Arc<PromptRegistry>,
    llm_config: LlmProviderConfig,
    config: EngineConfig,
}

impl RagEngine {
    pub fn new(
        embedder: Arc<dyn Embedder>,
        index: SharedIndex,
        llm: Arc<dyn ChatProvider>,
        registry: Arc<PromptRegistry>,
        llm_config: LlmProviderConfig,
        config: EngineConfig,
    ) -> Self {
        RagEngine {
            embedder,
            index,
            llm,
            registry,
            llm_config,
            config,
        }
    }

    pub fn registry(&self) -> &PromptRegistry {
        &self.registry
    }

    pub fn index(&self) -> &SharedIndex {
        &self.index
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn embedder(&self) -> &Arc<dyn Embedder> {
        &self.embedder
    }

    /// Embeds the query and runs a thresholded top-k search.
    pub async fn retrieve_context(
        &self,
        query: &str,
        params: RetrievalParams,
    ) -> Result<Vec<RetrievalResult>, EngineError> {
        if query.trim().is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        let q = self.embedder.embed_one(query).await?;
        let hits = self.index.read().search(&q.values, params.k, params.threshold)?;
        Ok(hits)
    }

    /// Issues `variant.n_candidates` independent completions. Failed or empty
    /// completions are dropped; at least one must succeed.
    pub async fn generate_candidates(
        &self,
        query: &str,
        context: &[RetrievalResult],
        variant: &PromptVariant,
    ) -> Result<Vec<String>, EngineError> {
        let prompt = self.registry.render_qa_prompt(variant, query, context)?;
        let temperature = if variant.strategy.compares() {
            self.llm_config.compare_temperature
        } else {
            self.llm_config.temperature
        };
        let request = ChatRequest {
            messages: vec![ChatMessage::system(prompt.system), ChatMessage::user(prompt.user)],
            temperature,
            max_tokens: self.llm_config.max_output_tokens,
        };
        let results = join_all((0..variant.n_candidates).map(|_| self.llm.complete(&request))).await;
        let mut candidates = Vec::with_capacity(results.len());
        let mut last_error = None;
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(text) if !text.trim().is_empty() => candidates.push(text),
                Ok(_) => {
                    log::warn!("candidate {i} for {} was empty", variant.variant_id);
                    last_error = Some(ProviderError::InvalidResponse("empty completion".into()));
                }
                Err(e) => {
                    log::warn!("candidate {i} for {} failed: {e}", variant.variant_id);
                    last_error = Some(e);
                }
            }
        }
        if candidates.is_empty() {
            return Err(EngineError::AllCandidatesFailed {
                attempted: variant.n_candidates,
                last_error: last_error.unwrap_or_else(|| ProviderError::Unavailable("no candidates requested".into())),
            });
        }
        Ok(candidates)
    }

    /// Picks the candidate whose embedding is, on average, closest to the
    /// retrieved context. Ties go to the lowest index.
    pub async fn select_best(
        &self,
        candidates: &[String],
        context: &[RetrievalResult],
    ) -> Result<Selection, EngineError> {
        assert!(!candidates.is_empty(), "select_best needs at least one candidate");
        if candidates.len() == 1 {
            return Ok(Selection {
                index: 0,
                text: candidates[0].clone(),
                grounding_scores: None,
            });
        }
        let context_vectors = self.context_vectors(context).await?;
        let embedded = self.embedder.embed_batch(candidates).await?;
        let scores: Vec<f64> = embedded
            .iter()
            .map(|c| {
                if context_vectors.is_empty() {
                    0.0
                } else {
                    context_vectors.iter().map(|v| dot(&c.values, v)).sum::<f64>() / context_vectors.len() as f64
                }
            })
            .collect();
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        Ok(Selection {
            index: best,
            text: candidates[best].clone(),
            grounding_scores: Some(scores),
        })
    }

    /// Stored vectors for the context entries; entries no longer in the index
    /// are re-embedded from their payload text.
    async fn context_vectors(&self, context: &[RetrievalResult]) -> Result<Vec<Vec<f32>>, EngineError> {
        let mut vectors: Vec<Option<Vec<f32>>> = {
            let index = self.index.read();
            context
                .iter()
                .map(|r| index.get(&r.entry_id).map(|e| e.vector.clone()))
                .collect()
        };
        for (slot, r) in vectors.iter_mut().zip(context) {
            if slot.is_none() {
                *slot = Some(self.embedder.embed_one(r.text()).await?.values);
            }
        }
        Ok(vectors.into_iter().flatten().collect())
    }

    pub async fn answer_query(&self, query: &str, variant_id: &str) -> Result<Answer, EngineError> {
        self.answer_query_with(query, variant_id, self.config.retrieval).await
    }

    /// Full pipeline with explicit retrieval parameters (clamped to valid ranges).
    pub async fn answer_query_with(
        &self,
        query: &str,
        variant_id: &str,
        params: RetrievalParams,
    ) -> Result<Answer, EngineError> {
        let started = Instant::now();
        let variant = self.registry.get(variant_id)?.clone();
        if query.trim().is_empty() {
            return Err(EngineError::EmptyQuery);
        }
        let context = self.retrieve_context(query, params.clamped()).await?;
        if context.is_empty() {
            return Ok(Answer {
                answer_text: self.config.abstention_message.clone(),
                abstained: true,
                sources: vec![],
                variant_id: variant.variant_id,
                candidates_generated: variant.n_candidates,
                sentence_count: count_sentences(&self.config.abstention_message),
                limit_violated: false,
                latency_ms: started.elapsed().as_millis() as u64,
            });
        }
        let candidates = self.generate_candidates(query, &context, &variant).await?;
        let selection = self.select_best(&candidates, &context).await?;
        let sentence_count = count_sentences(&selection.text);
        let limit_violated = variant
            .sentence_limit
            .max_sentences()
            .is_some_and(|max| sentence_count > max);
        Ok(Answer {
            answer_text: selection.text,
            abstained: false,
            sources: context.iter().map(Source::from).collect(),
            variant_id: variant.variant_id,
            candidates_generated: variant.n_candidates,
            sentence_count,
            limit_violated,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

#[async_trait]
impl QaEngine for RagEngine {
    async fn answer(&self, query: &str, variant_id: &str) -> Result<Answer, EngineError> {
        self.answer_query(query, variant_id).await
    }
}
