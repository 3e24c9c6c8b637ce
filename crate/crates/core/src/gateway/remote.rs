use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendReply, ChatBackend, CompletionRequest, FinishReason, GatewayError, Role, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL; `/chat/completions` is appended.
    pub base_url: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    30_000
}

/// Chat-completions client over HTTPS.
pub struct RemoteBackend {
    url: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// The wire format restricts `name` to `[A-Za-z0-9_-]{1,64}`.
fn wire_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .take(64)
        .collect()
}

fn role_str(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    }
}

impl RemoteBackend {
    /// Reads the API key from the configured environment variable.
    pub fn from_config(config: &RemoteConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| GatewayError::Auth(format!("environment variable {} is not set", config.api_key_env)))?;
        Self::new(&config.base_url, api_key, Duration::from_millis(config.timeout_ms))
    }

    pub fn new(base_url: &str, api_key: String, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Network(e.to_string()))?;
        Ok(Self {
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            client,
        })
    }

    pub fn request_body(request: &CompletionRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| {
                let mut v = json!({ "role": role_str(m.role), "content": m.content });
                if let Some(name) = &m.speaker_name {
                    v["name"] = json!(wire_name(name));
                }
                v
            })
            .collect();
        json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
            "user": request.request_id,
        })
    }
}

fn classify_status(status: u16, retry_after: Option<Duration>, body: &str) -> GatewayError {
    match status {
        401 | 403 => GatewayError::Auth(format!("HTTP {status}")),
        429 => GatewayError::RateLimited { retry_after },
        400 if body.contains("content_filter") || body.contains("content_policy") => {
            GatewayError::ContentPolicy(body.chars().take(200).collect())
        }
        408 | 504 => GatewayError::Timeout,
        s if s >= 500 => GatewayError::Network(format!("HTTP {s}")),
        s => GatewayError::InvalidRequest(format!("HTTP {s}: {}", body.chars().take(200).collect::<String>())),
    }
}

impl ChatBackend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn send(&self, request: &CompletionRequest) -> Result<BackendReply, GatewayError> {
        let body = Self::request_body(request);
        // credentials travel only in the header and are never logged
        tracing::debug!(target: "collab::audit", url = %self.url, body = %body, "chat completion request");
        let started = Instant::now();
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| {
                if e.is_timeout() {
                    GatewayError::Timeout
                } else {
                    GatewayError::Network(e.to_string())
                }
            })?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(Duration::from_secs_f64);
        let text = resp.text().map_err(|e| GatewayError::Network(e.to_string()))?;
        tracing::debug!(target: "collab::audit", status, elapsed_ms = started.elapsed().as_millis() as u64, body = %text, "chat completion response");
        if !(200..300).contains(&status) {
            return Err(classify_status(status, retry_after, &text));
        }
        let parsed: WireResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Network(format!("bad response body: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::Network("response has no choices".into()))?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("content_filter") => FinishReason::ContentFilter,
            _ => FinishReason::Stop,
        };
        let content = choice.message.content.unwrap_or_default();
        if finish_reason == FinishReason::ContentFilter && content.is_empty() {
            return Err(GatewayError::ContentPolicy(
                "completion withheld by content filter".into(),
            ));
        }
        Ok(BackendReply {
            content,
            finish_reason,
            usage: parsed
                .usage
                .map(|u| Usage {
                    prompt_tokens: u.prompt_tokens,
                    completion_tokens: u.completion_tokens,
                })
                .unwrap_or_default(),
        })
    }
}
