//! Per-session message pipeline: persist, memorize, decide, prompt, reply.

mod filter;
mod prompt;
mod reflection;
mod session;

pub use filter::{decide, Decision, DecisionReason, FilterInput, LogicFilterConfig, MentionDetector};
pub use prompt::{build_prompt, estimate_messages, BuiltPrompt, PromptInputs, TranscriptLine, SCOPE_GUARD};
pub use reflection::{ReflectionPolicy, ReflectionTracker};
pub use session::{truncate_to_tokens, GatewaySummarizer, Handled, Services, Session, SessionInit};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbedError;
use crate::gateway::{DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_TEMPERATURE};
use crate::memory::{MemoryError, RetrievalWeights, DEFAULT_K, DEFAULT_LAMBDA};
use crate::persistence::{AnalyticsSnapshot, PersistenceError};
use crate::persona::DocumentRef;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("session {0} has ended")]
    Ended(String),
    #[error("speaker {0} is not a participant of this session")]
    UnknownSpeaker(String),
    #[error("message is for channel {actual}, session channel is {expected}")]
    ChannelMismatch { expected: String, actual: String },
    #[error("message content is empty")]
    EmptyMessage,
    #[error("prompt budget of {0} tokens cannot hold the system prompt and the current message")]
    PromptBudget(u64),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Participant {
    pub participant_id: String,
    pub display_name: String,
    #[serde(default)]
    pub is_bot: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub instructions: String,
    #[serde(default)]
    pub context_documents: Vec<DocumentRef>,
}

impl TaskSpec {
    /// Text of the task announcement posted to the channel.
    pub fn announcement(&self) -> Option<String> {
        let (title, body) = (self.title.trim(), self.instructions.trim());
        match (title.is_empty(), body.is_empty()) {
            (true, true) => None,
            (false, true) => Some(title.to_string()),
            (true, false) => Some(body.to_string()),
            (false, false) => Some(format!("{title}: {body}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Pending,
    Live,
    Ended,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Deadline,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncomingMessage {
    pub channel_id: String,
    pub speaker_id: String,
    #[serde(default)]
    pub display_name: String,
    pub content: String,
    pub timestamp: f64,
    pub platform_message_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutboundReply {
    pub session_id: String,
    pub channel_id: String,
    pub text: String,
    pub event_seq: u64,
    pub in_reply_to: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalSessionRecord {
    pub session_id: String,
    pub reason: EndReason,
    pub ended_at: f64,
    pub analytics: AnalyticsSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub channel_id: String,
    pub participants: Vec<Participant>,
    pub task: TaskSpec,
    pub started_at: f64,
    pub deadline: f64,
    pub transcript_window: std::collections::VecDeque<TranscriptLine>,
    pub bot_last_spoke_at: Option<f64>,
    pub message_counter: u64,
    pub status: SessionStatus,
}

impl SessionState {
    pub fn bot(&self) -> &Participant {
        self.participants
            .iter()
            .find(|p| p.is_bot)
            .expect("validated: one bot per session")
    }

    pub fn participant(&self, id: &str) -> Option<&Participant> {
        self.participants.iter().find(|p| p.participant_id == id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSettings {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub k: usize,
}

impl Default for RetrievalSettings {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            lambda: DEFAULT_LAMBDA,
            k: DEFAULT_K,
        }
    }
}

impl RetrievalSettings {
    pub fn weights(&self) -> Result<RetrievalWeights, MemoryError> {
        RetrievalWeights::new(self.alpha, self.beta, self.gamma)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = self.weights() {
            errs.push(format!("retrieval: {e}"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            errs.push(format!("retrieval.lambda must be positive, got {}", self.lambda));
        }
        if self.k == 0 {
            errs.push("retrieval.k must be at least 1".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            model_id: "scripted".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

impl ModelSettings {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.model_id.trim().is_empty() {
            errs.push("gateway.model_id is empty".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            errs.push(format!(
                "gateway.temperature must lie in [0, 2], got {}",
                self.temperature
            ));
        }
        if self.max_output_tokens == 0 {
            errs.push("gateway.max_output_tokens must be positive".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionSettings {
    pub logic_filter: LogicFilterConfig,
    pub retrieval: RetrievalSettings,
    pub model: ModelSettings,
    pub transcript_window: usize,
    pub prompt_token_budget: u64,
    pub reflection: ReflectionPolicy,
    /// Whether the bot's own replies enter its memory stream.
    pub memorize_bot_replies: bool,
}

impl Default for SessionSettings {
    fn default() -> Self {
        Self {
            logic_filter: LogicFilterConfig::default(),
            retrieval: RetrievalSettings::default(),
            model: ModelSettings::default(),
            transcript_window: 20,
            prompt_token_budget: 3000,
            reflection: ReflectionPolicy::default(),
            memorize_bot_replies: true,
        }
    }
}

impl SessionSettings {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.logic_filter.validate();
        errs.extend(self.retrieval.validate());
        errs.extend(self.model.validate());
        if self.transcript_window == 0 {
            errs.push("transcript_window must be at least 1".into());
        }
        if self.prompt_token_budget == 0 {
            errs.push("prompt_token_budget must be positive".into());
        }
        if self.reflection.every_messages == 0 {
            errs.push("reflection.every_messages must be at least 1".into());
        }
        if !(self.reflection.importance_threshold > 0.0) {
            errs.push("reflection.importance_threshold must be positive".into());
        }
        errs
    }
}
