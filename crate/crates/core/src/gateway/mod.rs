//! Chat-completion gateway.
//!
//! [`Gateway`] wraps any [`ChatBackend`] with request validation, retries,
//! an in-flight cap and a shared token budget. Backends: [`EchoBackend`],
//! [`ScriptedBackend`], [`FlakyBackend`] for fault injection, and
//! [`RemoteBackend`] for a chat-completions HTTP endpoint.

mod backends;
mod remote;
mod retry;

pub use backends::{EchoBackend, FlakyBackend, ScriptRule, ScriptedBackend};
pub use remote::{RemoteBackend, RemoteConfig};
pub use retry::{RetryFailure, RetryHint, RetryPolicy, Retryable};

use std::sync::atomic::{AtomicI64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 400;
pub const DEFAULT_TOKEN_FACTOR: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_name: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
            speaker_name: None,
        }
    }

    pub fn user(content: impl Into<String>, speaker_name: Option<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
            speaker_name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub request_id: String,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        let invalid = |m: &str| Err(GatewayError::InvalidRequest(m.to_string()));
        if self.messages.is_empty() {
            return invalid("messages must not be empty");
        }
        if self.messages.iter().any(|m| m.content.trim().is_empty()) {
            return invalid("message content must not be empty");
        }
        if self.messages.iter().skip(1).any(|m| m.role == Role::System) {
            return invalid("a system message may only appear first");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return invalid("temperature must lie in [0, 2]");
        }
        if self.max_output_tokens == 0 {
            return invalid("max_output_tokens must be positive");
        }
        Ok(())
    }

    pub fn last_message(&self) -> Option<&ChatMessage> {
        self.messages.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    ContentFilter,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// What a backend returns for one attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    pub latency_ms: u64,
    pub attempts: u32,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("network error: {0}")]
    Network(String),
    #[error("request timed out")]
    Timeout,
    #[error("rejected by content policy: {0}")]
    ContentPolicy(String),
    #[error("token budget exceeded: need {requested}, {remaining} left")]
    BudgetExceeded { requested: u64, remaining: i64 },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<GatewayError> },
    #[error("deadline exceeded after {attempts} attempts: {last}")]
    DeadlineExceeded { attempts: u32, last: Box<GatewayError> },
}

impl Retryable for GatewayError {
    fn retry_hint(&self) -> RetryHint {
        match self {
            GatewayError::RateLimited { retry_after: Some(d) } => RetryHint::After(*d),
            GatewayError::RateLimited { retry_after: None } | GatewayError::Network(_) | GatewayError::Timeout => {
                RetryHint::Backoff
            }
            _ => RetryHint::Fatal,
        }
    }
}

pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    fn send(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError>;
}

/// Whitespace-delimited chunks times `factor`, rounded up.
pub fn count_tokens_estimate(text: &str, factor: f64) -> u64 {
    let raw = text.split_whitespace().count() as f64 * factor;
    let nearest = raw.round();
    // products like 1000 * 1.3 land a hair above the integer
    if (raw - nearest).abs() < 1e-9 {
        nearest as u64
    } else {
        raw.ceil() as u64
    }
}

/// Counting semaphore bounding concurrent calls. A cap of 0 means unbounded.
#[derive(Debug)]
pub struct InflightLimiter {
    cap: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
}

pub struct InflightPermit<'a> {
    limiter: &'a InflightLimiter,
}

impl InflightLimiter {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            in_use: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> InflightPermit<'_> {
        let mut n = self.in_use.lock();
        while self.cap > 0 && *n >= self.cap {
            self.freed.wait(&mut n);
        }
        *n += 1;
        InflightPermit { limiter: self }
    }

    pub fn in_use(&self) -> usize {
        *self.in_use.lock()
    }
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        *self.limiter.in_use.lock() -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Shared token allowance across all requests of a gateway.
#[derive(Debug)]
pub struct TokenBudget {
    remaining: AtomicI64,
}

impl TokenBudget {
    pub fn new(tokens: u64) -> Self {
        Self {
            remaining: AtomicI64::new(tokens as i64),
        }
    }

    pub fn remaining(&self) -> i64 {
        self.remaining.load(Ordering::SeqCst)
    }

    fn reserve(&self, amount: u64) -> Result<(), GatewayError> {
        let amount = amount as i64;
        self.remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |r| {
                (r >= amount).then_some(r - amount)
            })
            .map(|_| ())
            .map_err(|remaining| GatewayError::BudgetExceeded {
                requested: amount as u64,
                remaining,
            })
    }

    fn settle(&self, reserved: u64, used: u64) {
        self.remaining
            .fetch_add(reserved as i64 - used as i64, Ordering::SeqCst);
    }
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    policy: RetryPolicy,
    clock: Arc<dyn Clock>,
    limiter: InflightLimiter,
    budget: Option<TokenBudget>,
    token_factor: f64,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, clock: Arc<dyn Clock>) -> Self {
        Self {
            backend,
            policy: RetryPolicy::default(),
            clock,
            limiter: InflightLimiter::new(8),
            budget: None,
            token_factor: DEFAULT_TOKEN_FACTOR,
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_inflight_cap(mut self, cap: usize) -> Self {
        self.limiter = InflightLimiter::new(cap);
        self
    }

    pub fn with_token_budget(mut self, tokens: u64) -> Self {
        self.budget = Some(TokenBudget::new(tokens));
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn budget(&self) -> Option<&TokenBudget> {
        self.budget.as_ref()
    }

    pub fn token_factor(&self) -> f64 {
        self.token_factor
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let reserved = match &self.budget {
            Some(b) => {
                let prompt: u64 = request
                    .messages
                    .iter()
                    .map(|m| count_tokens_estimate(&m.content, self.token_factor))
                    .sum();
                let need = prompt + u64::from(request.max_output_tokens);
                b.reserve(need)?;
                need
            }
            None => 0,
        };
        let started = self.clock.now();
        let outcome = {
            let _permit = self.limiter.acquire();
            self.policy.run(self.clock.as_ref(), |attempt| {
                tracing::debug!(
                    backend = self.backend.name(),
                    request_id = %request.request_id,
                    attempt,
                    "chat completion attempt"
                );
                self.backend.send(request)
            })
        };
        let latency_ms = ((self.clock.now() - started).max(0.0) * 1000.0).round() as u64;
        match outcome {
            Ok((reply, attempts)) => {
                if let Some(b) = &self.budget {
                    b.settle(reserved, reply.usage.prompt_tokens + reply.usage.completion_tokens);
                }
                Ok(CompletionResult {
                    content: reply.content,
                    finish_reason: reply.finish_reason,
                    usage: reply.usage,
                    latency_ms,
                    attempts,
                })
            }
            Err(f) => {
                if let Some(b) = &self.budget {
                    b.settle(reserved, 0);
                }
                tracing::warn!(request_id = %request.request_id, attempts = f.attempts, error = %f.last, "chat completion failed");
                Err(match (f.deadline_exceeded, f.last.retry_hint()) {
                    (true, _) => GatewayError::DeadlineExceeded {
                        attempts: f.attempts,
                        last: Box::new(f.last),
                    },
                    (false, RetryHint::Fatal) => f.last,
                    (false, _) => GatewayError::Exhausted {
                        attempts: f.attempts,
                        last: Box::new(f.last),
                    },
                })
            }
        }
    }
}
