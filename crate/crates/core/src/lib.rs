//! Retrieval-augmented question answering over drug formularies.
//!
//! The pipeline runs in stages:
//!
//! 1. [`ingest`] turns source documents into overlapping, page-tagged chunks.
//! 2. [`structure`] asks a chat model to reorganize each chunk into a
//!    labeled [`structure::DrugRecord`].
//! 3. [`embedding`] maps text to unit vectors; [`index`] stores them and
//!    answers exact cosine top-k queries.
//! 4. [`engine`] retrieves context, renders a prompt from the 9-variant
//!    [`prompts`] grid, generates one or four candidates, picks one and
//!    cites its sources, or abstains when nothing clears the threshold.
//! 5. [`eval`] scores answers against reference answers and aggregates
//!    survey feedback.

pub mod config;
pub mod embedding;
pub mod engine;
pub mod eval;
pub mod feedback;
pub mod http;
pub mod index;
pub mod ingest;
pub mod llm;
pub mod mock;
pub mod pipeline;
pub mod prompts;
pub mod structure;

pub use config::AppConfig;
pub use embedding::{Embedder, EmbeddingVector, TestFnvEmbedder};
pub use engine::{Answer, EngineError, QaEngine, RagEngine};
pub use index::{RetrievalResult, SharedIndex, VectorEntry, VectorIndex};
pub use llm::ChatProvider;
pub use prompts::{PromptRegistry, PromptVariant};

// The guide's code listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/ingestion.md")]
    mod ingestion {}
    #[doc = include_str!("../../../book/src/structuring.md")]
    mod structuring {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/prompts.md")]
    mod prompts {}
    #[doc = include_str!("../../../book/src/answering.md")]
    mod answering {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
}
