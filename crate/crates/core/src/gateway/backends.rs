use std::collections::VecDeque;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{
    count_tokens_estimate, BackendReply, ChatBackend, CompletionRequest, FinishReason, GatewayError, Role, Usage,
    DEFAULT_TOKEN_FACTOR,
};

fn usage_for(request: &CompletionRequest, reply: &str) -> Usage {
    Usage {
        prompt_tokens: request
            .messages
            .iter()
            .map(|m| count_tokens_estimate(&m.content, DEFAULT_TOKEN_FACTOR))
            .sum(),
        completion_tokens: count_tokens_estimate(reply, DEFAULT_TOKEN_FACTOR),
    }
}

/// Replies with the content of the last user message.
#[derive(Debug, Default, Clone, Copy)]
pub struct EchoBackend;

impl ChatBackend for EchoBackend {
    fn name(&self) -> &str {
        "echo"
    }

    fn send(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let content = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.clone())
            .ok_or_else(|| GatewayError::InvalidRequest("no user message to echo".into()))?;
        Ok(BackendReply {
            usage: usage_for(request, &content),
            content,
            finish_reason: FinishReason::Stop,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub pattern: String,
    pub reply: String,
}

impl ScriptRule {
    pub fn new(pattern: impl Into<String>, reply: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            reply: reply.into(),
        }
    }
}

/// Deterministic backend: the first rule whose pattern occurs in the last
/// message wins; otherwise the fallback reply is used.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    rules: Vec<ScriptRule>,
    fallback: String,
}

impl ScriptedBackend {
    pub const DEFAULT_FALLBACK: &'static str = "Noted. Let's keep going.";

    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            rules,
            fallback: Self::DEFAULT_FALLBACK.into(),
        }
    }

    pub fn with_fallback(mut self, fallback: impl Into<String>) -> Self {
        self.fallback = fallback.into();
        self
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn send(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let last = request.last_message().map(|m| m.content.as_str()).unwrap_or("");
        let content = self
            .rules
            .iter()
            .find(|r| last.contains(&r.pattern))
            .map(|r| r.reply.clone())
            .unwrap_or_else(|| self.fallback.clone());
        Ok(BackendReply {
            usage: usage_for(request, &content),
            content,
            finish_reason: FinishReason::Stop,
        })
    }
}

/// Fails with the queued errors, in order, before delegating to `inner`.
pub struct FlakyBackend {
    inner: Arc<dyn ChatBackend>,
    failures: Mutex<VecDeque<GatewayError>>,
    calls: AtomicU32,
}

impl FlakyBackend {
    pub fn new(inner: Arc<dyn ChatBackend>, failures: Vec<GatewayError>) -> Self {
        Self {
            inner,
            failures: Mutex::new(failures.into()),
            calls: AtomicU32::new(0),
        }
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for FlakyBackend {
    fn name(&self) -> &str {
        "flaky"
    }

    fn send(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(e) = self.failures.lock().pop_front() {
            return Err(e);
        }
        self.inner.send(request)
    }
}
