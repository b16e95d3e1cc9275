//! Retry policy and JSON POST helper shared by the remote providers.

use std::time::Duration;

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, thiserror::Error)]
pub enum ProviderError {
    #[error("provider returned HTTP {status} after {attempts} attempt(s): {body}")]
    Status { status: u16, attempts: u32, body: String },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("unexpected provider response: {0}")]
    InvalidResponse(String),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
}

impl ProviderError {
    /// Last HTTP status seen, if the failure came from one.
    pub fn status(&self) -> Option<u16> {
        match self {
            ProviderError::Status { status, .. } => Some(*status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            backoff_base_ms: 250,
        }
    }
}

impl RetryPolicy {
    /// Full-jitter exponential backoff before retry number `retry` (1-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let cap = self
            .backoff_base_ms
            .saturating_mul(1u64 << (retry.saturating_sub(1)).min(20));
        Duration::from_millis(rand::rng().random_range(0..=cap))
    }
}

/// 408, 429 and 5xx are transient; every other failure status is final.
pub fn is_retryable(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

pub(crate) fn build_client(timeout_ms: u64) -> Result<reqwest::Client, ProviderError> {
    reqwest::Client::builder()
        .timeout(Duration::from_millis(timeout_ms))
        .build()
        .map_err(|e| ProviderError::Transport {
            attempts: 0,
            message: e.to_string(),
        })
}

pub(crate) fn join_url(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

/// POSTs `body` as JSON and decodes the JSON response, retrying transient
/// failures according to `policy`.
pub(crate) async fn post_json<B, T>(
    client: &reqwest::Client,
    url: &str,
    api_key: Option<&str>,
    body: &B,
    policy: &RetryPolicy,
) -> Result<T, ProviderError>
where
    B: Serialize + ?Sized,
    T: DeserializeOwned,
{
    let max_attempts = policy.max_attempts.max(1);
    let mut attempt = 0;
    loop {
        attempt += 1;
        let mut req = client.post(url).json(body);
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let retry = match req.send().await {
            Ok(resp) => {
                let status = resp.status().as_u16();
                if resp.status().is_success() {
                    let bytes = resp.bytes().await.map_err(|e| ProviderError::Transport {
                        attempts: attempt,
                        message: e.to_string(),
                    })?;
                    return serde_json::from_slice(&bytes)
                        .map_err(|e| ProviderError::InvalidResponse(e.to_string()));
                }
                let body = resp.text().await.unwrap_or_default();
                let err = ProviderError::Status {
                    status,
                    attempts: attempt,
                    body: truncate(&body, 512),
                };
                if !is_retryable(status) {
                    return Err(err);
                }
                err
            }
            Err(e) => ProviderError::Transport {
                attempts: attempt,
                message: e.to_string(),
            },
        };
        if attempt >= max_attempts {
            return Err(retry);
        }
        log::debug!("retrying {url} after: {retry}");
        tokio::time::sleep(policy.delay(attempt)).await;
    }
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((idx, _)) => format!("{}...", &s[..idx]),
        None => s.to_string(),
    }
}
