//! Chat-completion providers.

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use crate::http::{self, ProviderError, RetryPolicy};

pub const LLM_API_KEY_ENV: &str = "DRUG_INSIGHTS_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    /// Content of the last user message, or "".
    pub fn last_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map_or("", |m| m.content.as_str())
    }
}

#[async_trait]
pub trait ChatProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    /// One completion; returns the assistant message text.
    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LlmProvider {
    Remote,
    /// Offline echo model from [`crate::mock::EchoChatProvider`].
    #[default]
    MockEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmProviderConfig {
    pub provider: LlmProvider,
    pub endpoint_url: String,
    pub model_name: String,
    /// Sampling temperature for single-candidate variants.
    pub temperature: f64,
    /// Sampling temperature for compare variants, where the candidates should differ.
    pub compare_temperature: f64,
    pub max_output_tokens: u32,
    pub retry: RetryPolicy,
    pub timeout_ms: u64,
}

impl Default for LlmProviderConfig {
    fn default() -> Self {
        LlmProviderConfig {
            provider: LlmProvider::MockEcho,
            endpoint_url: "https://api.openai.com/v1".into(),
            model_name: "gpt-4o".into(),
            temperature: 0.0,
            compare_temperature: 0.7,
            max_output_tokens: 512,
            retry: RetryPolicy::default(),
            timeout_ms: 60_000,
        }
    }
}

impl LlmProviderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature >= 0.0 && self.compare_temperature >= 0.0) {
            return Err("temperatures must be >= 0".into());
        }
        if self.max_output_tokens == 0 {
            return Err("max_output_tokens must be >= 1".into());
        }
        Ok(())
    }
}

pub fn build_chat_provider(cfg: &LlmProviderConfig) -> Result<Arc<dyn ChatProvider>, ProviderError> {
    cfg.validate().map_err(ProviderError::Unavailable)?;
    Ok(match cfg.provider {
        LlmProvider::Remote => Arc::new(RemoteChatProvider::new(cfg.clone())?),
        LlmProvider::MockEcho => Arc::new(crate::mock::EchoChatProvider::new()),
    })
}

/// OpenAI-compatible `POST {endpoint}/chat/completions` client.
pub struct RemoteChatProvider {
    cfg: LlmProviderConfig,
    client: reqwest::Client,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct CompletionBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

impl RemoteChatProvider {
    /// Reads the bearer token from `DRUG_INSIGHTS_LLM_API_KEY` if set.
    pub fn new(cfg: LlmProviderConfig) -> Result<Self, ProviderError> {
        let api_key = std::env::var(LLM_API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(cfg, api_key)
    }

    pub fn with_api_key(cfg: LlmProviderConfig, api_key: Option<String>) -> Result<Self, ProviderError> {
        let client = http::build_client(cfg.timeout_ms)?;
        Ok(RemoteChatProvider { cfg, client, api_key })
    }
}

#[async_trait]
impl ChatProvider for RemoteChatProvider {
    fn provider_id(&self) -> &str {
        &self.cfg.model_name
    }

    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let url = http::join_url(&self.cfg.endpoint_url, "chat/completions");
        let body = CompletionBody {
            model: &self.cfg.model_name,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
        };
        let resp: CompletionResponse =
            http::post_json(&self.client, &url, self.api_key.as_deref(), &body, &self.cfg.retry).await?;
        resp.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| ProviderError::InvalidResponse("completion has no message content".into()))
    }
}
