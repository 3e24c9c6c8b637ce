//! Chat platform bridge: request signature checks, inbound event parsing,
//! delivery deduplication, and outbound sending for Slack and an
//! in-process loopback.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use hmac::{Hmac, KeyInit, Mac};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::Sha256;
use thiserror::Error;

use crate::clock::Clock;
use crate::gateway::{RetryHint, RetryPolicy, Retryable};

/// Requests whose timestamp is further than this from now are replays.
pub const MAX_REQUEST_AGE_SECS: i64 = 300;
pub const DEFAULT_CHUNK_CHARS: usize = 4000;
pub const DEDUP_WINDOW: usize = 1000;
const SIGNATURE_VERSION: &str = "v0";

#[derive(Debug, Clone, Error, PartialEq)]
pub enum AdapterError {
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("channel not found: {0}")]
    ChannelNotFound(String),
    #[error("message text is empty")]
    EmptyText,
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("network error: {0}")]
    Network(String),
    #[error("platform error: {0}")]
    Platform(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<AdapterError> },
}

impl Retryable for AdapterError {
    fn retry_hint(&self) -> RetryHint {
        match self {
            AdapterError::RateLimited { retry_after: Some(d) } => RetryHint::After(*d),
            AdapterError::RateLimited { retry_after: None } | AdapterError::Network(_) => RetryHint::Backoff,
            _ => RetryHint::Fatal,
        }
    }
}

fn signature_mac(secret: &[u8], timestamp: &str, body: &[u8]) -> Hmac<Sha256> {
    let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("HMAC accepts any key length");
    mac.update(SIGNATURE_VERSION.as_bytes());
    mac.update(b":");
    mac.update(timestamp.as_bytes());
    mac.update(b":");
    mac.update(body);
    mac
}

/// `v0=<hex>` signature for a request, as the platform computes it.
pub fn sign_request(secret: &[u8], timestamp: &str, body: &[u8]) -> String {
    let tag = signature_mac(secret, timestamp, body).finalize().into_bytes();
    format!("{SIGNATURE_VERSION}={}", hex::encode(tag))
}

/// Checks a request signature in constant time. Anything malformed, or a
/// timestamp outside the replay window around `now`, fails.
pub fn verify_signature(timestamp: &str, body: &[u8], signature: &str, secret: &[u8], now: i64) -> bool {
    let Ok(ts) = timestamp.trim().parse::<i64>() else {
        return false;
    };
    if (now - ts).abs() > MAX_REQUEST_AGE_SECS {
        return false;
    }
    let Some(hex_sig) = signature.strip_prefix("v0=") else {
        return false;
    };
    let Ok(expected) = hex::decode(hex_sig) else {
        return false;
    };
    signature_mac(secret, timestamp.trim(), body)
        .verify_slice(&expected)
        .is_ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageEvent {
    pub channel: String,
    pub user: String,
    pub text: String,
    /// Platform timestamp, unique per channel.
    pub ts: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thread_ts: Option<String>,
    pub raw: Value,
}

impl MessageEvent {
    pub fn timestamp_seconds(&self) -> Option<f64> {
        self.ts.parse().ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "envelope_type", rename_all = "snake_case")]
pub enum PlatformEvent {
    VerificationChallenge { challenge: String },
    MessageEvent(MessageEvent),
    Unsupported { kind: String, raw: Value },
}

fn str_field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str)
}

/// Parses a Slack Events API body. Messages written by the bot itself,
/// or by any bot integration, yield `Ok(None)`. Threaded replies are
/// flattened into the channel stream.
pub fn parse_event(body: &[u8], bot_user_id: &str) -> Result<Option<PlatformEvent>, AdapterError> {
    let raw: Value = serde_json::from_slice(body).map_err(|e| AdapterError::Malformed(e.to_string()))?;
    let envelope = str_field(&raw, "type").ok_or_else(|| AdapterError::Malformed("missing `type`".into()))?;
    match envelope {
        "url_verification" => {
            let challenge = str_field(&raw, "challenge")
                .ok_or_else(|| AdapterError::Malformed("url_verification without challenge".into()))?;
            Ok(Some(PlatformEvent::VerificationChallenge {
                challenge: challenge.to_string(),
            }))
        }
        "event_callback" => {
            let event = raw
                .get("event")
                .ok_or_else(|| AdapterError::Malformed("event_callback without event".into()))?;
            let kind = str_field(event, "type").unwrap_or_default();
            if kind != "message" {
                return Ok(Some(PlatformEvent::Unsupported {
                    kind: kind.to_string(),
                    raw: raw.clone(),
                }));
            }
            let user = str_field(event, "user").unwrap_or_default();
            let subtype = str_field(event, "subtype");
            if event.get("bot_id").is_some() || subtype == Some("bot_message") || user == bot_user_id {
                return Ok(None);
            }
            if let Some(st) = subtype.filter(|s| *s != "thread_broadcast") {
                return Ok(Some(PlatformEvent::Unsupported {
                    kind: format!("message.{st}"),
                    raw: raw.clone(),
                }));
            }
            let channel = str_field(event, "channel").unwrap_or_default();
            let text = str_field(event, "text").unwrap_or_default();
            let ts = str_field(event, "ts").unwrap_or_default();
            if channel.is_empty() || user.is_empty() || text.trim().is_empty() || ts.is_empty() {
                return Err(AdapterError::Malformed(
                    "message event needs channel, user, text and ts".into(),
                ));
            }
            Ok(Some(PlatformEvent::MessageEvent(MessageEvent {
                channel: channel.to_string(),
                user: user.to_string(),
                text: text.to_string(),
                ts: ts.to_string(),
                thread_ts: str_field(event, "thread_ts").map(str::to_string),
                raw: raw.clone(),
            })))
        }
        other => {
            tracing::debug!(kind = other, "dropping unsupported envelope");
            Ok(Some(PlatformEvent::Unsupported {
                kind: other.to_string(),
                raw,
            }))
        }
    }
}

/// Remembers the most recent message ids of each channel.
#[derive(Debug)]
pub struct Deduplicator {
    cap: usize,
    channels: HashMap<String, (VecDeque<String>, HashSet<String>)>,
}

impl Default for Deduplicator {
    fn default() -> Self {
        Self::new(DEDUP_WINDOW)
    }
}

impl Deduplicator {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            channels: HashMap::new(),
        }
    }

    /// True the first time `id` is seen in `channel` within the window.
    pub fn first_seen(&mut self, channel: &str, id: &str) -> bool {
        let (order, set) = self.channels.entry(channel.to_string()).or_default();
        if !set.insert(id.to_string()) {
            return false;
        }
        order.push_back(id.to_string());
        if order.len() > self.cap {
            if let Some(old) = order.pop_front() {
                set.remove(&old);
            }
        }
        true
    }
}

/// Splits `text` into pieces of at most `cap` characters whose
/// concatenation is `text`. A piece ends after whitespace when some lies
/// in the second half of the window.
pub fn split_chunks(text: &str, cap: usize) -> Vec<String> {
    let cap = cap.max(1);
    let mut out = Vec::new();
    let mut rest = text;
    while rest.chars().count() > cap {
        let window: Vec<(usize, char)> = rest.char_indices().take(cap).collect();
        let cut = window[cap / 2..]
            .iter()
            .rev()
            .find(|(_, c)| c.is_whitespace())
            .map(|(i, c)| i + c.len_utf8())
            .unwrap_or_else(|| rest.char_indices().nth(cap).map_or(rest.len(), |(i, _)| i));
        out.push(rest[..cut].to_string());
        rest = &rest[cut..];
    }
    if !rest.is_empty() {
        out.push(rest.to_string());
    }
    out
}

pub trait ChatPlatform: Send + Sync {
    /// Posts `text`, split into chunks if needed. Returns one platform
    /// message id per chunk, in order.
    fn send_message(&self, channel: &str, text: &str) -> Result<Vec<String>, AdapterError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopbackMessage {
    pub channel: String,
    pub text: String,
    pub message_id: String,
}

type Listener = Arc<dyn Fn(&LoopbackMessage) + Send + Sync>;

/// In-process platform: sent messages land in a per-channel sink.
#[derive(Default)]
pub struct LoopbackPlatform {
    channels: Mutex<HashMap<String, Vec<LoopbackMessage>>>,
    listeners: Mutex<Vec<Listener>>,
    next_id: AtomicU64,
    chunk_chars: Option<usize>,
}

impl LoopbackPlatform {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_chunk_chars(mut self, cap: usize) -> Self {
        self.chunk_chars = Some(cap);
        self
    }

    pub fn open_channel(&self, channel: &str) {
        self.channels.lock().entry(channel.to_string()).or_default();
    }

    pub fn close_channel(&self, channel: &str) {
        self.channels.lock().remove(channel);
    }

    pub fn messages(&self, channel: &str) -> Vec<LoopbackMessage> {
        self.channels.lock().get(channel).cloned().unwrap_or_default()
    }

    /// Called synchronously for every delivered chunk.
    pub fn on_send(&self, listener: impl Fn(&LoopbackMessage) + Send + Sync + 'static) {
        self.listeners.lock().push(Arc::new(listener));
    }
}

impl ChatPlatform for LoopbackPlatform {
    fn send_message(&self, channel: &str, text: &str) -> Result<Vec<String>, AdapterError> {
        if text.trim().is_empty() {
            return Err(AdapterError::EmptyText);
        }
        let delivered = {
            let mut channels = self.channels.lock();
            let sink = channels
                .get_mut(channel)
                .ok_or_else(|| AdapterError::ChannelNotFound(channel.to_string()))?;
            let mut delivered = Vec::new();
            for chunk in split_chunks(text, self.chunk_chars.unwrap_or(DEFAULT_CHUNK_CHARS)) {
                let n = self.next_id.fetch_add(1, Ordering::Relaxed) + 1;
                let m = LoopbackMessage {
                    channel: channel.to_string(),
                    text: chunk,
                    message_id: format!("loop-{n}"),
                };
                sink.push(m.clone());
                delivered.push(m);
            }
            delivered
        };
        let listeners = self.listeners.lock().clone();
        for m in &delivered {
            for l in &listeners {
                l(m);
            }
        }
        Ok(delivered.into_iter().map(|m| m.message_id).collect())
    }
}

/// Slack Web API client for `chat.postMessage`.
pub struct SlackClient {
    http: reqwest::blocking::Client,
    base_url: String,
    token: String,
    policy: RetryPolicy,
    clock: Arc<dyn Clock>,
}

impl SlackClient {
    pub const DEFAULT_BASE_URL: &'static str = "https://slack.com/api";

    pub fn new(token: impl Into<String>, clock: Arc<dyn Clock>) -> Self {
        Self {
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(10))
                .build()
                .expect("static client configuration"),
            base_url: Self::DEFAULT_BASE_URL.into(),
            token: token.into(),
            policy: RetryPolicy::default(),
            clock,
        }
    }

    pub fn with_base_url(mut self, url: impl Into<String>) -> Self {
        self.base_url = url.into().trim_end_matches('/').to_string();
        self
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    fn post_once(&self, channel: &str, text: &str) -> Result<String, AdapterError> {
        let resp = self
            .http
            .post(format!("{}/chat.postMessage", self.base_url))
            .bearer_auth(&self.token)
            .json(&serde_json::json!({ "channel": channel, "text": text }))
            .send()
            .map_err(|e| AdapterError::Network(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            let retry_after = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(AdapterError::RateLimited { retry_after });
        }
        if status >= 500 {
            return Err(AdapterError::Network(format!("HTTP {status}")));
        }
        let body: Value = resp.json().map_err(|e| AdapterError::Platform(e.to_string()))?;
        if body.get("ok").and_then(Value::as_bool) == Some(true) {
            return Ok(str_field(&body, "ts").unwrap_or_default().to_string());
        }
        let code = str_field(&body, "error").unwrap_or("unknown_error");
        Err(match code {
            "channel_not_found" | "not_in_channel" | "is_archived" => {
                AdapterError::ChannelNotFound(channel.to_string())
            }
            "invalid_auth" | "not_authed" | "token_revoked" | "account_inactive" => {
                AdapterError::Auth(code.to_string())
            }
            "ratelimited" => AdapterError::RateLimited { retry_after: None },
            other => AdapterError::Platform(other.to_string()),
        })
    }
}

impl ChatPlatform for SlackClient {
    fn send_message(&self, channel: &str, text: &str) -> Result<Vec<String>, AdapterError> {
        if text.trim().is_empty() {
            return Err(AdapterError::EmptyText);
        }
        let mut ids = Vec::new();
        for chunk in split_chunks(text, DEFAULT_CHUNK_CHARS) {
            let (id, _) = self
                .policy
                .run(self.clock.as_ref(), |_| self.post_once(channel, &chunk))
                .map_err(|f| match f.last {
                    e @ (AdapterError::Auth(_) | AdapterError::ChannelNotFound(_)) => e,
                    last => AdapterError::Exhausted {
                        attempts: f.attempts,
                        last: Box::new(last),
                    },
                })?;
            ids.push(id);
        }
        Ok(ids)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SECRET: &[u8] = b"8f742231b10e8888abcd99yyyzzz85a5";

    #[test]
    fn sign_then_verify() {
        let sig = sign_request(SECRET, "1531420618", b"hello");
        assert!(verify_signature("1531420618", b"hello", &sig, SECRET, 1531420618));
        assert!(!verify_signature("1531420618", b"hellp", &sig, SECRET, 1531420618));
        assert!(!verify_signature(
            "1531420618",
            b"hello",
            &sig,
            SECRET,
            1531420618 + 301
        ));
        assert!(verify_signature("1531420618", b"hello", &sig, SECRET, 1531420618 + 300));
    }

    #[test]
    fn malformed_signature_headers() {
        let now = 1531420618;
        for bad in ["", "v0=", "v1=abcd", "v0=zz", "abcdef"] {
            assert!(!verify_signature("1531420618", b"hello", bad, SECRET, now), "{bad}");
        }
        let sig = sign_request(SECRET, "1531420618", b"hello");
        assert!(!verify_signature("soon", b"hello", &sig, SECRET, now));
    }

    #[test]
    fn url_verification() {
        let ev = parse_event(br#"{"type":"url_verification","challenge":"abc"}"#, "UBOT").unwrap();
        assert_eq!(
            ev,
            Some(PlatformEvent::VerificationChallenge {
                challenge: "abc".into()
            })
        );
    }

    #[test]
    fn message_event_and_self_filter() {
        let body = br#"{"type":"event_callback","event":{"type":"message","channel":"C1","user":"U1","text":"hi","ts":"1.5","thread_ts":"1.0"}}"#;
        match parse_event(body, "UBOT").unwrap() {
            Some(PlatformEvent::MessageEvent(m)) => {
                assert_eq!(
                    (m.channel.as_str(), m.user.as_str(), m.text.as_str()),
                    ("C1", "U1", "hi")
                );
                assert_eq!(m.timestamp_seconds(), Some(1.5));
            }
            other => panic!("{other:?}"),
        }
        let own = br#"{"type":"event_callback","event":{"type":"message","channel":"C1","user":"UBOT","text":"hi","ts":"1"}}"#;
        assert_eq!(parse_event(own, "UBOT").unwrap(), None);
        let bot = br#"{"type":"event_callback","event":{"type":"message","channel":"C1","bot_id":"B1","text":"hi","ts":"1"}}"#;
        assert_eq!(parse_event(bot, "UBOT").unwrap(), None);
    }

    #[test]
    fn unsupported_and_malformed() {
        let reaction = br#"{"type":"event_callback","event":{"type":"reaction_added"}}"#;
        assert!(matches!(
            parse_event(reaction, "U").unwrap(),
            Some(PlatformEvent::Unsupported { .. })
        ));
        assert!(matches!(
            parse_event(b"{not json", "U"),
            Err(AdapterError::Malformed(_))
        ));
        let empty =
            br#"{"type":"event_callback","event":{"type":"message","channel":"C1","user":"U1","text":"","ts":"1"}}"#;
        assert!(parse_event(empty, "U").is_err());
    }

    #[test]
    fn dedup_window_per_channel() {
        let mut d = Deduplicator::new(2);
        assert!(d.first_seen("c", "1"));
        assert!(!d.first_seen("c", "1"));
        assert!(d.first_seen("other", "1"));
        assert!(d.first_seen("c", "2"));
        assert!(d.first_seen("c", "3"));
        // "1" fell out of the window
        assert!(d.first_seen("c", "1"));
    }

    #[test]
    fn chunking_arithmetic() {
        let text: String = "x".repeat(9000);
        let chunks = split_chunks(&text, 4000);
        assert_eq!(chunks.iter().map(|c| c.len()).collect::<Vec<_>>(), [4000, 4000, 1000]);
        let words = "word ".repeat(1800);
        let chunks = split_chunks(&words, 4000);
        assert!(chunks.iter().all(|c| c.chars().count() <= 4000));
        assert_eq!(chunks.concat(), words);
        assert!(chunks[0].ends_with(' '));
    }

    #[test]
    fn loopback_round_trip() {
        let lp = LoopbackPlatform::new();
        lp.open_channel("c1");
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s2 = seen.clone();
        lp.on_send(move |m| s2.lock().push(m.text.clone()));
        let ids = lp.send_message("c1", "héllo ✓").unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(lp.messages("c1")[0].text, "héllo ✓");
        assert_eq!(seen.lock().as_slice(), ["héllo ✓"]);
        assert_eq!(
            lp.send_message("nope", "x"),
            Err(AdapterError::ChannelNotFound("nope".into()))
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn chunks_concatenate_and_respect_cap(text in "[a-z ✓\n]{0,300}", cap in 1usize..50) {
                let chunks = split_chunks(&text, cap);
                prop_assert_eq!(chunks.concat(), text);
                prop_assert!(chunks.iter().all(|c| !c.is_empty() && c.chars().count() <= cap));
            }
        }
    }
}
