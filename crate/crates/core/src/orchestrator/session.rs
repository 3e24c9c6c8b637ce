use std::collections::{HashSet, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde_json::json;
use sha2::{Digest, Sha256};

use super::filter::{decide, Decision, DecisionReason, FilterInput, MentionDetector};
use super::prompt::{build_prompt, PromptInputs, TranscriptLine};
use super::reflection::ReflectionTracker;
use super::{
    EndReason, FinalSessionRecord, IncomingMessage, OutboundReply, Participant, SessionError, SessionSettings,
    SessionState, SessionStatus, TaskSpec,
};
use crate::clock::Clock;
use crate::embedding::Embedder;
use crate::gateway::{count_tokens_estimate, ChatMessage, CompletionRequest, Gateway};
use crate::memory::{
    MemoryConfig, MemoryRecord, MemoryStore, NewMemory, RecordKind, ReflectionRequest, RetrievalQuery, ScoredMemory,
    Summarizer, SummarizerError,
};
use crate::persistence::{compute_analytics, EventKind, EventStore, NewEvent, TagLexicon};

const SEEN_IDS_CAP: usize = 1000;

/// Shared, thread-safe collaborators of every session.
#[derive(Clone)]
pub struct Services {
    pub embedder: Arc<dyn Embedder>,
    pub gateway: Arc<Gateway>,
    pub events: Arc<dyn EventStore>,
    pub clock: Arc<dyn Clock>,
    pub lexicon: Arc<TagLexicon>,
}

pub struct SessionInit {
    pub session_id: String,
    pub channel_id: String,
    pub participants: Vec<Participant>,
    pub task: TaskSpec,
    pub started_at: f64,
    pub deadline: f64,
    pub persona_prompt: String,
    pub settings: SessionSettings,
    /// Defaults to a [`GatewaySummarizer`] on the session's model.
    pub summarizer: Option<Arc<dyn Summarizer + Send + Sync>>,
}

/// Summarizes reflection windows with the chat model.
pub struct GatewaySummarizer {
    gateway: Arc<Gateway>,
    model_id: String,
    label: String,
    calls: AtomicU64,
}

impl GatewaySummarizer {
    pub const INSTRUCTION: &'static str = "Summarize the key points, decisions and open questions \
of this team conversation in at most three sentences. Attribute ideas to the people who raised them.";
    /// First line of the user message, so scripted backends can tell
    /// reflection requests from chat turns.
    pub const HEADER: &'static str = "Conversation to summarize:";

    pub fn new(gateway: Arc<Gateway>, model_id: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            gateway,
            model_id: model_id.into(),
            label: label.into(),
            calls: AtomicU64::new(0),
        }
    }
}

impl Summarizer for GatewaySummarizer {
    fn summarize(&self, transcript: &str) -> Result<String, SummarizerError> {
        let n = self.calls.fetch_add(1, Ordering::Relaxed) + 1;
        let request = CompletionRequest {
            model_id: self.model_id.clone(),
            messages: vec![
                ChatMessage::system(Self::INSTRUCTION),
                ChatMessage::user(format!("{}\n{transcript}", Self::HEADER), None),
            ],
            temperature: 0.0,
            max_output_tokens: 200,
            request_id: format!("{}:reflect:{n}", self.label),
        };
        self.gateway
            .complete(&request)
            .map(|r| r.content)
            .map_err(|e| SummarizerError(e.to_string()))
    }
}

/// Cuts `text` after the last whole word that keeps the token estimate
/// within `max_tokens`. Returns the text and whether it was shortened.
pub fn truncate_to_tokens(text: &str, max_tokens: u32, factor: f64) -> (String, bool) {
    let trimmed = text.trim();
    if count_tokens_estimate(trimmed, factor) <= u64::from(max_tokens) {
        return (trimmed.to_string(), false);
    }
    let mut end = 0;
    for (n, word) in trimmed.split_whitespace().enumerate() {
        if count_tokens_estimate(&"w ".repeat(n + 1), factor) > u64::from(max_tokens) {
            break;
        }
        end = word.as_ptr() as usize - trimmed.as_ptr() as usize + word.len();
    }
    (trimmed[..end].to_string(), true)
}

/// What happened to one incoming message.
#[derive(Debug, Clone, Default)]
pub struct Handled {
    /// Sequence number of the persisted message event; `None` for a
    /// duplicate delivery.
    pub message_seq: Option<u64>,
    pub decision: Option<Decision>,
    /// Memories retrieved for the message, best first.
    pub retrieved: Vec<ScoredMemory>,
    pub reply: Option<OutboundReply>,
    pub reflection: Option<Arc<MemoryRecord>>,
}

/// One live team conversation with its memory stream.
///
/// All mutation goes through `&mut self`, so wrapping a session in a mutex
/// serializes its pipeline.
pub struct Session {
    state: SessionState,
    settings: SessionSettings,
    persona_prompt: String,
    memory: MemoryStore,
    services: Services,
    summarizer: Arc<dyn Summarizer + Send + Sync>,
    mention: MentionDetector,
    tracker: ReflectionTracker,
    seen: (VecDeque<String>, HashSet<String>),
    final_record: Option<FinalSessionRecord>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("session_id", &self.state.session_id)
            .field("status", &self.state.status)
            .field("memories", &self.memory.len())
            .finish()
    }
}

fn validate_init(init: &SessionInit) -> Vec<String> {
    let mut errs = init.settings.validate();
    if init.session_id.trim().is_empty() {
        errs.push("session_id is empty".into());
    }
    if init.channel_id.trim().is_empty() {
        errs.push("channel_id is empty".into());
    }
    if !(init.deadline > init.started_at) {
        errs.push("deadline must be after started_at".into());
    }
    let bots = init.participants.iter().filter(|p| p.is_bot).count();
    if bots != 1 {
        errs.push(format!("a session needs exactly one bot participant, found {bots}"));
    }
    let mut ids = HashSet::new();
    for p in &init.participants {
        if p.participant_id.trim().is_empty() || p.display_name.trim().is_empty() {
            errs.push("participants need an id and a display name".into());
        }
        if !ids.insert(p.participant_id.as_str()) {
            errs.push(format!("duplicate participant {}", p.participant_id));
        }
    }
    errs
}

impl Session {
    /// Validates the setup, logs `session_start` followed by the task
    /// announcement (if any), and returns the live session together with
    /// the announcement text for posting to the channel.
    pub fn start(services: Services, init: SessionInit) -> Result<(Self, Option<String>), SessionError> {
        let errs = validate_init(&init);
        if !errs.is_empty() {
            return Err(SessionError::Config(errs));
        }
        let digest = hex::encode(Sha256::digest(init.persona_prompt.as_bytes()));
        services.events.append(
            &init.session_id,
            NewEvent::new(
                EventKind::SessionStart,
                init.started_at,
                None,
                json!({
                    "channel_id": init.channel_id,
                    "participants": init.participants,
                    "task_title": init.task.title,
                    "context_documents": init.task.context_documents,
                    "started_at": init.started_at,
                    "deadline": init.deadline,
                    "persona_digest": digest,
                    "settings": init.settings,
                }),
            ),
        )?;
        let announcement = init.task.announcement();
        if let Some(text) = &announcement {
            services.events.append(
                &init.session_id,
                NewEvent::new(
                    EventKind::Message,
                    init.started_at,
                    None,
                    json!({ "content": text, "display_name": "Task" }),
                ),
            )?;
        }
        let bot = init.participants.iter().find(|p| p.is_bot).expect("validated");
        let mention = MentionDetector::new(&bot.display_name, &bot.participant_id);
        let summarizer = init.summarizer.clone().unwrap_or_else(|| {
            Arc::new(GatewaySummarizer::new(
                services.gateway.clone(),
                init.settings.model.model_id.clone(),
                init.session_id.clone(),
            ))
        });
        let memory = MemoryStore::new(MemoryConfig::for_embedder(services.embedder.as_ref()));
        let state = SessionState {
            session_id: init.session_id,
            channel_id: init.channel_id,
            participants: init.participants,
            task: init.task,
            started_at: init.started_at,
            deadline: init.deadline,
            transcript_window: VecDeque::new(),
            bot_last_spoke_at: None,
            message_counter: 0,
            status: SessionStatus::Live,
        };
        Ok((
            Self {
                state,
                settings: init.settings,
                persona_prompt: init.persona_prompt,
                memory,
                services,
                summarizer,
                mention,
                tracker: ReflectionTracker::default(),
                seen: (VecDeque::new(), HashSet::new()),
                final_record: None,
            },
            announcement,
        ))
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn settings(&self) -> &SessionSettings {
        &self.settings
    }

    pub fn memory(&self) -> &MemoryStore {
        &self.memory
    }

    pub fn persona_prompt(&self) -> &str {
        &self.persona_prompt
    }

    pub fn is_live(&self) -> bool {
        self.state.status == SessionStatus::Live
    }

    pub fn final_record(&self) -> Option<&FinalSessionRecord> {
        self.final_record.as_ref()
    }

    fn log(
        &self,
        kind: EventKind,
        ts: f64,
        speaker: Option<&str>,
        payload: serde_json::Value,
    ) -> Result<u64, SessionError> {
        Ok(self
            .services
            .events
            .append(&self.state.session_id, NewEvent::new(kind, ts, speaker, payload))?
            .seq)
    }

    fn remember_id(&mut self, id: &str) {
        let (order, set) = &mut self.seen;
        if set.insert(id.to_string()) {
            order.push_back(id.to_string());
            if order.len() > SEEN_IDS_CAP {
                if let Some(old) = order.pop_front() {
                    set.remove(&old);
                }
            }
        }
    }

    fn push_line(&mut self, line: TranscriptLine) {
        self.state.transcript_window.push_back(line);
        while self.state.transcript_window.len() > self.settings.transcript_window {
            self.state.transcript_window.pop_front();
        }
    }

    fn memorize(&mut self, content: &str, speaker_id: &str, at: f64) -> Result<Arc<MemoryRecord>, SessionError> {
        let embedding = self.services.embedder.embed(content)?;
        let record = self.memory.append(NewMemory {
            content: content.to_string(),
            kind: RecordKind::Observation,
            speaker_id: speaker_id.to_string(),
            channel_id: self.state.channel_id.clone(),
            created_at: at,
            embedding,
        })?;
        self.tracker.observe(record.id, record.importance);
        Ok(record)
    }

    /// Runs the full pipeline for one participant message, then gives the
    /// reflection trigger a chance to fire.
    pub fn handle_incoming(&mut self, msg: &IncomingMessage) -> Result<Handled, SessionError> {
        if !self.is_live() {
            return Err(SessionError::Ended(self.state.session_id.clone()));
        }
        if msg.timestamp >= self.state.deadline {
            self.end_session(EndReason::Deadline, self.state.deadline)?;
            return Err(SessionError::Ended(self.state.session_id.clone()));
        }
        if msg.channel_id != self.state.channel_id {
            return Err(SessionError::ChannelMismatch {
                expected: self.state.channel_id.clone(),
                actual: msg.channel_id.clone(),
            });
        }
        let speaker = match self.state.participant(&msg.speaker_id) {
            Some(p) if !p.is_bot => p.clone(),
            _ => return Err(SessionError::UnknownSpeaker(msg.speaker_id.clone())),
        };
        let content = msg.content.trim();
        if content.is_empty() {
            return Err(SessionError::EmptyMessage);
        }
        if !msg.platform_message_id.is_empty() && self.seen.1.contains(&msg.platform_message_id) {
            return Ok(Handled::default());
        }

        let message_seq = self.log(
            EventKind::Message,
            msg.timestamp,
            Some(&speaker.participant_id),
            json!({
                "content": content,
                "display_name": speaker.display_name,
                "platform_message_id": msg.platform_message_id,
            }),
        )?;
        if !msg.platform_message_id.is_empty() {
            self.remember_id(&msg.platform_message_id);
        }
        self.state.message_counter += 1;

        let record = self.memorize(content, &speaker.participant_id, msg.timestamp)?;
        self.push_line(TranscriptLine {
            speaker_id: speaker.participant_id.clone(),
            display_name: speaker.display_name.clone(),
            content: content.to_string(),
            timestamp: msg.timestamp,
        });

        let r = &self.settings.retrieval;
        let query = RetrievalQuery {
            query_text: content.to_string(),
            query_embedding: record.embedding.clone(),
            now: msg.timestamp,
            k: r.k,
            lambda: r.lambda,
            weights: r.weights()?,
            channel_id: Some(self.state.channel_id.clone()),
        };
        let retrieved = self.memory.retrieve_top_k_where(&query, |m| m.id != record.id)?;
        let relevance = retrieved.first().map_or(0.5, |m| m.relevance);
        let decision = decide(
            &FilterInput {
                mentioned: self.mention.is_mentioned(content),
                relevance,
                now: msg.timestamp,
                bot_last_spoke_at: self.state.bot_last_spoke_at,
            },
            &self.settings.logic_filter,
        );
        let mut handled = Handled {
            message_seq: Some(message_seq),
            decision: Some(decision),
            ..Handled::default()
        };

        if !decision.respond {
            self.log(
                EventKind::Suppression,
                msg.timestamp,
                None,
                json!({ "reason": decision.reason.as_str(), "relevance": relevance, "in_reply_to": message_seq }),
            )?;
        } else {
            handled.reply = self.respond(message_seq, msg.timestamp, decision.reason, &retrieved)?;
        }
        handled.retrieved = retrieved;
        handled.reflection = self.maybe_reflect(msg.timestamp)?;
        Ok(handled)
    }

    fn respond(
        &mut self,
        message_seq: u64,
        at: f64,
        reason: DecisionReason,
        retrieved: &[ScoredMemory],
    ) -> Result<Option<OutboundReply>, SessionError> {
        let task = self.state.task.announcement();
        let factor = self.services.gateway.token_factor();
        let window: Vec<TranscriptLine> = self.state.transcript_window.iter().cloned().collect();
        let built = build_prompt(
            &PromptInputs {
                persona_prompt: &self.persona_prompt,
                task: task.as_deref(),
                scope_guard: self.settings.logic_filter.scope_guard_enabled,
                token_budget: self.settings.prompt_token_budget,
                token_factor: factor,
            },
            retrieved,
            &window,
        )
        .ok_or(SessionError::PromptBudget(self.settings.prompt_token_budget))?;

        let request_id = format!("{}:{}", self.state.session_id, message_seq);
        let memory_channels: Vec<&str> = {
            let mut cs: Vec<&str> = retrieved
                .iter()
                .filter(|m| built.memory_ids.contains(&m.record.id))
                .map(|m| m.record.channel_id.as_str())
                .collect();
            cs.sort_unstable();
            cs.dedup();
            cs
        };
        self.log(
            EventKind::PromptAudit,
            at,
            None,
            json!({
                "request_id": request_id,
                "in_reply_to": message_seq,
                "channel_id": self.state.channel_id,
                "memory_ids": built.memory_ids,
                "memory_channels": memory_channels,
                "dropped_lines": built.dropped_lines,
                "messages": built.messages,
            }),
        )?;

        let model = &self.settings.model;
        let request = CompletionRequest {
            model_id: model.model_id.clone(),
            messages: built.messages,
            temperature: model.temperature,
            max_output_tokens: model.max_output_tokens,
            request_id: request_id.clone(),
        };
        let result = match self.services.gateway.complete(&request) {
            Ok(r) => r,
            Err(e) => {
                tracing::warn!(session = %self.state.session_id, error = %e, "gateway failure, staying silent");
                self.log(
                    EventKind::Suppression,
                    at,
                    None,
                    json!({ "reason": "gateway_error", "error": e.to_string(), "in_reply_to": message_seq }),
                )?;
                return Ok(None);
            }
        };
        let (text, truncated) =
            truncate_to_tokens(&result.content, self.settings.logic_filter.max_reply_tokens, factor);
        if text.is_empty() {
            self.log(
                EventKind::Suppression,
                at,
                None,
                json!({ "reason": "empty_reply", "in_reply_to": message_seq }),
            )?;
            return Ok(None);
        }

        let reply_at = at.max(self.services.clock.now());
        let bot = self.state.bot().clone();
        let reply_seq = self.log(
            EventKind::BotReply,
            reply_at,
            Some(&bot.participant_id),
            json!({
                "content": text,
                "display_name": bot.display_name,
                "in_reply_to": message_seq,
                "request_id": request_id,
                "reason": reason.as_str(),
                "attempts": result.attempts,
                "finish_reason": result.finish_reason,
                "truncated": truncated,
            }),
        )?;
        self.state.bot_last_spoke_at = Some(reply_at);
        self.state.message_counter += 1;
        if self.settings.memorize_bot_replies {
            self.memorize(&text, &bot.participant_id, reply_at)?;
        }
        self.push_line(TranscriptLine {
            speaker_id: bot.participant_id.clone(),
            display_name: bot.display_name.clone(),
            content: text.clone(),
            timestamp: reply_at,
        });
        Ok(Some(OutboundReply {
            session_id: self.state.session_id.clone(),
            channel_id: self.state.channel_id.clone(),
            text,
            event_seq: reply_seq,
            in_reply_to: message_seq,
        }))
    }

    /// Synthesizes a reflection over the observations since the last one
    /// when either trigger has fired. A failing summarizer leaves the
    /// window pending so the next message retries it.
    pub fn maybe_reflect(&mut self, now: f64) -> Result<Option<Arc<MemoryRecord>>, SessionError> {
        if !self.tracker.is_due(&self.settings.reflection) {
            return Ok(None);
        }
        let Some(window) = self.tracker.window() else {
            return Ok(None);
        };
        let req = ReflectionRequest {
            channel_id: self.state.channel_id.clone(),
            window,
            speaker_id: self.state.bot().participant_id.clone(),
            created_at: now,
        };
        let record =
            match self
                .memory
                .synthesize_reflection(self.services.embedder.as_ref(), req, self.summarizer.as_ref())
            {
                Ok(r) => r,
                Err(e) => {
                    tracing::warn!(session = %self.state.session_id, error = %e, "reflection skipped");
                    return Ok(None);
                }
            };
        self.tracker.reset();
        self.log(
            EventKind::Reflection,
            now,
            None,
            json!({
                "content": record.content,
                "record_id": record.id,
                "source_ids": record.source_ids,
            }),
        )?;
        Ok(Some(record))
    }

    /// Ends the session and computes its final analytics. Ending twice
    /// returns the first record.
    pub fn end_session(&mut self, reason: EndReason, now: f64) -> Result<FinalSessionRecord, SessionError> {
        if let Some(done) = &self.final_record {
            return Ok(done.clone());
        }
        self.log(EventKind::SessionEnd, now, None, json!({ "reason": reason }))?;
        self.state.status = SessionStatus::Ended;
        let events = self.services.events.events(&self.state.session_id)?;
        let record = FinalSessionRecord {
            session_id: self.state.session_id.clone(),
            reason,
            ended_at: now,
            analytics: compute_analytics(&self.state.session_id, &events, &self.services.lexicon),
        };
        self.final_record = Some(record.clone());
        Ok(record)
    }

    /// Fires the deadline if it has passed. Returns the final record when
    /// this call ended the session.
    pub fn tick(&mut self, now: f64) -> Result<Option<FinalSessionRecord>, SessionError> {
        if self.is_live() && now >= self.state.deadline {
            return self.end_session(EndReason::Deadline, self.state.deadline).map(Some);
        }
        Ok(None)
    }
}
