//! TOML configuration shared by the CLI and the service.
//!
//! API keys are read from the environment only; a config file that carries
//! one is rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::EmbedderConfig;
use crate::engine::{EngineConfig, RetrievalParams, DEFAULT_ABSTENTION_MESSAGE};
use crate::eval::EvalOptions;
use crate::ingest::ChunkParams;
use crate::llm::LlmProviderConfig;
use crate::prompts::{PromptConfig, DEFAULT_VARIANT};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config key `{0}` looks like a secret; pass secrets through environment variables")]
    SecretInConfig(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub index_path: PathBuf,
    pub feedback_log: PathBuf,
    /// Allowed CORS origins; `["*"]` allows any.
    pub cors_origins: Vec<String>,
    pub recent_queries_capacity: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            listen: "127.0.0.1:8080".into(),
            index_path: "index.divx".into(),
            feedback_log: "feedback.jsonl".into(),
            cors_origins: vec!["http://localhost:5173".into()],
            recent_queries_capacity: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub threshold: f64,
    pub default_variant: String,
    pub abstention_message: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let r = RetrievalParams::default();
        RetrievalConfig {
            k: r.k,
            threshold: r.threshold,
            default_variant: DEFAULT_VARIANT.into(),
            abstention_message: DEFAULT_ABSTENTION_MESSAGE.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub embedder: EmbedderConfig,
    pub llm: LlmProviderConfig,
    pub chunking: ChunkParams,
    pub retrieval: RetrievalConfig,
    pub prompts: PromptConfig,
    pub service: ServiceConfig,
    pub eval: EvalOptions,
}

fn is_secret_key(key: &str) -> bool {
    let k = key.to_ascii_lowercase();
    k == "api_key" || k.ends_with("_api_key") || k == "secret" || k == "password" || k == "bearer_token"
}

fn find_secret(value: &toml::Value, prefix: &str) -> Option<String> {
    let table = value.as_table()?;
    table.iter().find_map(|(k, v)| {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if is_secret_key(k) {
            Some(path)
        } else {
            find_secret(v, &path)
        }
    })
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let raw: toml::Value = toml::from_str(text)?;
        if let Some(key) = find_secret(&raw, "") {
            return Err(ConfigError::SecretInConfig(key));
        }
        let cfg: AppConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.embedder
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("[embedder] {e}")))?;
        self.llm.validate().map_err(|e| ConfigError::Invalid(format!("[llm] {e}")))?;
        self.chunking
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("[chunking] {e}")))?;
        if self.retrieval.k == 0 || !(0.0..=1.0).contains(&self.retrieval.threshold) {
            return Err(ConfigError::Invalid("[retrieval] needs k >= 1 and 0 <= threshold <= 1".into()));
        }
        if !crate::prompts::list_variants()
            .iter()
            .any(|v| v.variant_id == self.retrieval.default_variant)
        {
            return Err(ConfigError::Invalid(format!(
                "[retrieval] unknown default_variant {:?}",
                self.retrieval.default_variant
            )));
        }
        if self.service.recent_queries_capacity == 0 {
            return Err(ConfigError::Invalid("[service] recent_queries_capacity must be >= 1".into()));
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            retrieval: RetrievalParams {
                k: self.retrieval.k,
                threshold: self.retrieval.threshold,
            },
            abstention_message: self.retrieval.abstention_message.clone(),
            default_variant: self.retrieval.default_variant.clone(),
        }
    }
}
