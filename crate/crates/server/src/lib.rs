//! HTTP service over a loaded index.
//!
//! | route | method | body |
//! |---|---|---|
//! | `/v1/query` | POST | `{query, variant_id?, k?, threshold?}` |
//! | `/v1/feedback` | POST | `{query_id, signal \| survey, free_text?}` |
//! | `/v1/prompts` | GET | |
//! | `/v1/health` | GET | |

use std::net::SocketAddr;
use std::num::NonZeroUsize;
use std::sync::{Arc, OnceLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use drug_insights::embedding::{build_embedder, Embedder};
use drug_insights::engine::{Answer, EngineConfig, EngineError, RagEngine, RetrievalParams};
use drug_insights::feedback::{FeedbackEvent, FeedbackLog, Signal, SurveyResponse};
use drug_insights::index::{IndexConfig, SharedIndex, VectorIndex};
use drug_insights::llm::{build_chat_provider, ChatProvider, LlmProviderConfig};
use drug_insights::prompts::PromptRegistry;
use drug_insights::AppConfig;
use lru::LruCache;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};
use uuid::Uuid;

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("{0}")]
    Config(String),
    #[error("cannot load index: {0}")]
    Index(#[from] drug_insights::index::IndexError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a running engine needs apart from the index.
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub llm: Arc<dyn ChatProvider>,
    pub llm_config: LlmProviderConfig,
    pub registry: Arc<PromptRegistry>,
    pub engine_config: EngineConfig,
}

impl Providers {
    pub fn from_config(cfg: &AppConfig) -> Result<Self, ServerError> {
        Ok(Providers {
            embedder: build_embedder(&cfg.embedder).map_err(|e| ServerError::Config(e.to_string()))?,
            llm: build_chat_provider(&cfg.llm).map_err(|e| ServerError::Config(e.to_string()))?,
            llm_config: cfg.llm.clone(),
            registry: Arc::new(PromptRegistry::new(cfg.prompts.clone()).map_err(|e| ServerError::Config(e.to_string()))?),
            engine_config: cfg.engine_config(),
        })
    }
}

pub struct AppState {
    providers: Providers,
    engine: OnceLock<Arc<RagEngine>>,
    recent: Mutex<LruCache<Uuid, ()>>,
    feedback: Arc<FeedbackLog>,
}

impl AppState {
    pub fn new(providers: Providers, feedback: FeedbackLog, recent_capacity: usize) -> Arc<Self> {
        let cap = NonZeroUsize::new(recent_capacity).unwrap_or(NonZeroUsize::MIN);
        Arc::new(AppState {
            providers,
            engine: OnceLock::new(),
            recent: Mutex::new(LruCache::new(cap)),
            feedback: Arc::new(feedback),
        })
    }

    /// Makes the service ready. Fails if the index dimension does not match
    /// the embedder or an index is already installed.
    pub fn install_index(&self, index: VectorIndex) -> Result<(), ServerError> {
        let expected = self.providers.embedder.dimension();
        if index.dimension() != expected {
            return Err(ServerError::Config(format!(
                "index dimension {} does not match embedder dimension {expected}",
                index.dimension()
            )));
        }
        let p = &self.providers;
        let engine = RagEngine::new(
            p.embedder.clone(),
            SharedIndex::new(index),
            p.llm.clone(),
            p.registry.clone(),
            p.llm_config.clone(),
            p.engine_config.clone(),
        );
        self.engine
            .set(Arc::new(engine))
            .map_err(|_| ServerError::Config("index already installed".into()))
    }

    pub fn is_ready(&self) -> bool {
        self.engine.get().is_some()
    }
}

pub fn router(state: Arc<AppState>, cors_origins: &[String]) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/feedback", post(feedback))
        .route("/v1/prompts", get(prompts))
        .route("/v1/health", get(health))
        .layer(cors_layer(cors_origins))
        .with_state(state)
}

fn cors_layer(origins: &[String]) -> CorsLayer {
    let base = CorsLayer::new().allow_methods(Any).allow_headers(Any);
    if origins.iter().any(|o| o == "*") {
        return base.allow_origin(Any);
    }
    let parsed: Vec<HeaderValue> = origins.iter().filter_map(|o| o.parse().ok()).collect();
    base.allow_origin(AllowOrigin::list(parsed))
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub query: String,
    #[serde(default)]
    pub variant_id: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub query_id: Uuid,
    #[serde(flatten)]
    pub answer: Answer,
}

async fn query(State(state): State<Arc<AppState>>, body: Result<Json<QueryRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    if req.query.trim().is_empty() {
        return error(StatusCode::BAD_REQUEST, "query is empty");
    }
    let Some(engine) = state.engine.get() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "index is still loading");
    };
    let defaults = engine.config();
    let variant = req.variant_id.unwrap_or_else(|| defaults.default_variant.clone());
    let params = RetrievalParams {
        k: req.k.unwrap_or(defaults.retrieval.k),
        threshold: req.threshold.unwrap_or(defaults.retrieval.threshold),
    }
    .clamped();
    match engine.answer_query_with(&req.query, &variant, params).await {
        Ok(answer) => {
            let query_id = Uuid::new_v4();
            state.recent.lock().put(query_id, ());
            Json(QueryResponse { query_id, answer }).into_response()
        }
        Err(e) => engine_error(e),
    }
}

fn engine_error(e: EngineError) -> Response {
    if e.is_client_error() {
        error(StatusCode::BAD_REQUEST, e.to_string())
    } else if e.is_provider_failure() {
        log::warn!("provider failure: {e}");
        error(StatusCode::SERVICE_UNAVAILABLE, "model provider unavailable")
    } else {
        let error_id = Uuid::new_v4();
        log::error!("internal error {error_id}: {e}");
        (
            StatusCode::INTERNAL_SERVER_ERROR,
            Json(json!({ "error": "internal error", "error_id": error_id })),
        )
            .into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct FeedbackRequest {
    pub query_id: String,
    #[serde(default)]
    pub signal: Option<Signal>,
    #[serde(default)]
    pub survey: Option<SurveyResponse>,
    #[serde(default)]
    pub free_text: Option<String>,
}

async fn feedback(State(state): State<Arc<AppState>>, body: Result<Json<FeedbackRequest>, JsonRejection>) -> Response {
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    if req.signal.is_some() == req.survey.is_some() {
        return error(StatusCode::BAD_REQUEST, "exactly one of signal or survey is required");
    }
    if let Some(q) = req.survey.as_ref().and_then(|s| s.out_of_range()) {
        return error(StatusCode::BAD_REQUEST, format!("{q} must be between 1 and 5"));
    }
    let known = Uuid::parse_str(&req.query_id).is_ok_and(|id| state.recent.lock().contains(&id));
    if !known {
        return error(StatusCode::NOT_FOUND, "unknown query_id");
    }
    let event = FeedbackEvent {
        event_id: Uuid::new_v4().to_string(),
        query_id: req.query_id,
        signal: req.signal,
        survey: req.survey,
        timestamp: Utc::now(),
        free_text: req.free_text,
    };
    let log = state.feedback.clone();
    match tokio::task::spawn_blocking(move || log.append(&event)).await {
        Ok(Ok(())) => StatusCode::NO_CONTENT.into_response(),
        Ok(Err(e)) => {
            log::error!("feedback log write failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "could not record feedback")
        }
        Err(e) => {
            log::error!("feedback writer panicked: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, "could not record feedback")
        }
    }
}

async fn prompts(State(state): State<Arc<AppState>>) -> Response {
    let list: Vec<_> = state
        .providers
        .registry
        .variants()
        .iter()
        .map(|v| {
            json!({
                "variant_id": v.variant_id,
                "sentence_limit": v.sentence_limit,
                "strategy": v.strategy,
                "n_candidates": v.n_candidates,
            })
        })
        .collect();
    Json(list).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.engine.get() {
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
        Some(engine) => {
            let index = engine.index().read();
            Json(json!({
                "status": "ok",
                "index_entries": index.len(),
                "dimension": index.dimension(),
            }))
            .into_response()
        }
    }
}

/// Binds, starts answering (health reports 503 until the index is loaded),
/// loads the index, then serves until Ctrl-C.
pub async fn serve(cfg: AppConfig) -> Result<(), ServerError> {
    let providers = Providers::from_config(&cfg)?;
    let feedback = FeedbackLog::open(&cfg.service.feedback_log)?;
    let state = AppState::new(providers, feedback, cfg.service.recent_queries_capacity);
    let app = router(state.clone(), &cfg.service.cors_origins);
    let listener = tokio::net::TcpListener::bind(&cfg.service.listen).await?;
    let addr: SocketAddr = listener.local_addr()?;
    log::info!("listening on http://{addr}");
    let server = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    });

    let defaults = IndexConfig {
        dimension: cfg.embedder.dimension,
        default_threshold: cfg.retrieval.threshold,
        default_k: cfg.retrieval.k,
    };
    let path = cfg.service.index_path.clone();
    let loaded = tokio::task::spawn_blocking(move || VectorIndex::load_with(path, defaults))
        .await
        .map_err(|e| ServerError::Config(format!("index loader panicked: {e}")))?;
    let installed = loaded.map_err(ServerError::from).and_then(|index| {
        log::info!("index loaded: {} entries, dimension {}", index.len(), index.dimension());
        state.install_index(index)
    });
    if let Err(e) = installed {
        server.abort();
        return Err(e);
    }
    server
        .await
        .map_err(|e| ServerError::Config(format!("server task failed: {e}")))??;
    Ok(())
}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
mod book_service {}
