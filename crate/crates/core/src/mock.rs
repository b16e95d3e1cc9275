//! Deterministic offline chat providers for tests, demos and `mock-echo` mode.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;

use crate::http::ProviderError;
use crate::llm::{ChatProvider, ChatRequest};
use crate::structure::{CHUNK_CLOSE, CHUNK_OPEN};

/// Echoes text back from its own prompt.
///
/// - A structuring prompt yields the chunk between the chunk markers.
/// - A question-answering prompt yields the body of `[SOURCE 1: ..]`.
/// - Anything else yields the last user message unchanged.
#[derive(Debug, Default)]
pub struct EchoChatProvider {
    calls: AtomicUsize,
}

impl EchoChatProvider {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// The text the echo model would answer with.
pub fn echo_text(prompt: &str) -> String {
    if let Some(inner) = between(prompt, &format!("{CHUNK_OPEN}\n"), &format!("\n{CHUNK_CLOSE}")) {
        return inner.to_string();
    }
    if let Some(start) = prompt.find("[SOURCE 1:") {
        let rest = &prompt[start..];
        if let Some(body) = rest.find('\n').and_then(|nl| between(&rest[nl..], "\n", "\n[/SOURCE 1]")) {
            return body.to_string();
        }
    }
    prompt.to_string()
}

fn between<'a>(s: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = s.find(open)? + open.len();
    let end = s[start..].find(close)? + start;
    Some(&s[start..end])
}

#[async_trait]
impl ChatProvider for EchoChatProvider {
    fn provider_id(&self) -> &str {
        "mock-echo"
    }

    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(echo_text(request.last_user_content()))
    }
}

type Script = dyn Fn(usize, &ChatRequest) -> Result<String, ProviderError> + Send + Sync;

/// Answers from a closure of `(call_index, request)`; records every request.
pub struct ScriptedChatProvider {
    script: Box<Script>,
    calls: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedChatProvider {
    pub fn new(script: impl Fn(usize, &ChatRequest) -> Result<String, ProviderError> + Send + Sync + 'static) -> Self {
        ScriptedChatProvider {
            script: Box::new(script),
            calls: AtomicUsize::new(0),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Returns `responses[i % len]` on call `i`.
    pub fn cycling(responses: Vec<String>) -> Self {
        assert!(!responses.is_empty());
        Self::new(move |i, _| Ok(responses[i % responses.len()].clone()))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().clone()
    }

    pub fn into_arc(self) -> Arc<Self> {
        Arc::new(self)
    }
}

#[async_trait]
impl ChatProvider for ScriptedChatProvider {
    fn provider_id(&self) -> &str {
        "mock-scripted"
    }

    async fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().push(request.clone());
        (self.script)(i, request)
    }
}
