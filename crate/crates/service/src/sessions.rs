//! One worker thread per live session. Commands reach the worker through
//! a queue, so messages of a session are handled strictly in arrival
//! order while sessions run in parallel.

use std::collections::{BTreeMap, HashMap};
use std::sync::mpsc;
use std::sync::Arc;

use collab_core::adapter::ChatPlatform;
use collab_core::clock::Clock;
use collab_core::memory::RecordId;
use collab_core::orchestrator::{
    Decision, EndReason, FinalSessionRecord, IncomingMessage, OutboundReply, Session, SessionState, SessionStatus,
};
use collab_core::persistence::TagLexicon;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use tokio::sync::oneshot;

use crate::error::ApiError;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlatformKind {
    #[default]
    Loopback,
    Slack,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub experiment_id: String,
    pub platform: PlatformKind,
    pub state: SessionState,
    pub final_record: Option<FinalSessionRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievedView {
    pub id: RecordId,
    pub recency: f64,
    pub relevance: f64,
    pub importance: f64,
    pub composite: f64,
}

/// Result of one incoming message, as returned to API callers.
#[derive(Debug, Clone, Serialize)]
pub struct Outcome {
    /// `None` when the message was a duplicate delivery.
    pub message_seq: Option<u64>,
    pub decision: Option<Decision>,
    pub retrieved: Vec<RetrievedView>,
    pub reply: Option<OutboundReply>,
    /// Platform ids of the delivered reply chunks.
    pub delivered: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delivery_error: Option<String>,
    pub reflection_id: Option<RecordId>,
}

type Reply<T> = oneshot::Sender<Result<T, ApiError>>;

enum Command {
    Incoming(IncomingMessage, Option<Reply<Outcome>>),
    End(Reply<FinalSessionRecord>),
    Tick(f64),
}

struct Handle {
    info: Arc<RwLock<SessionInfo>>,
    tx: mpsc::Sender<Command>,
    lexicon: Arc<TagLexicon>,
}

pub struct SessionManager {
    clock: Arc<dyn Clock>,
    sessions: RwLock<BTreeMap<String, Handle>>,
    /// Live sessions by channel id.
    channels: RwLock<HashMap<String, String>>,
}

struct Worker {
    session: Session,
    platform: Arc<dyn ChatPlatform>,
    info: Arc<RwLock<SessionInfo>>,
    clock: Arc<dyn Clock>,
}

impl Worker {
    fn sync_info(&self) {
        let mut info = self.info.write();
        info.state = self.session.state().clone();
        info.final_record = self.session.final_record().cloned();
    }

    fn incoming(&mut self, msg: &IncomingMessage) -> Result<Outcome, ApiError> {
        let handled = self.session.handle_incoming(msg)?;
        let mut outcome = Outcome {
            message_seq: handled.message_seq,
            decision: handled.decision,
            retrieved: handled
                .retrieved
                .iter()
                .map(|m| RetrievedView {
                    id: m.record.id,
                    recency: m.recency,
                    relevance: m.relevance,
                    importance: m.importance,
                    composite: m.composite,
                })
                .collect(),
            reply: handled.reply,
            delivered: Vec::new(),
            delivery_error: None,
            reflection_id: handled.reflection.map(|r| r.id),
        };
        if let Some(reply) = &outcome.reply {
            match self.platform.send_message(&reply.channel_id, &reply.text) {
                Ok(ids) => outcome.delivered = ids,
                Err(e) => {
                    tracing::warn!(session = %reply.session_id, "reply delivery failed: {e}");
                    outcome.delivery_error = Some(e.to_string());
                }
            }
        }
        Ok(outcome)
    }

    fn run(mut self, rx: mpsc::Receiver<Command>, announcement: Option<String>) {
        let channel = self.session.state().channel_id.clone();
        if let Some(text) = announcement {
            if let Err(e) = self.platform.send_message(&channel, &text) {
                tracing::warn!(%channel, "task announcement not delivered: {e}");
            }
        }
        while let Ok(cmd) = rx.recv() {
            // shared info is refreshed before anyone hears back, so a
            // follow-up read sees the effect
            match cmd {
                Command::Incoming(msg, reply) => {
                    let out = self.incoming(&msg);
                    if let Err(e) = &out {
                        tracing::debug!(%channel, "message rejected: {}", e.message);
                    }
                    self.sync_info();
                    if let Some(tx) = reply {
                        let _ = tx.send(out);
                    }
                }
                Command::End(tx) => {
                    let out = self.session.end_session(EndReason::Manual, self.clock.now());
                    self.sync_info();
                    let _ = tx.send(out.map_err(ApiError::from));
                }
                Command::Tick(now) => {
                    if let Err(e) = self.session.tick(now) {
                        tracing::error!(%channel, "deadline end failed: {e}");
                    }
                    self.sync_info();
                }
            }
            if !self.session.is_live() {
                break;
            }
        }
    }
}

impl SessionManager {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            clock,
            sessions: RwLock::new(BTreeMap::new()),
            channels: RwLock::new(HashMap::new()),
        }
    }

    pub fn contains(&self, session_id: &str) -> bool {
        self.sessions.read().contains_key(session_id)
    }

    pub fn channel_in_use(&self, channel_id: &str) -> bool {
        self.channels.read().contains_key(channel_id)
    }

    /// Hands a started session to a new worker thread.
    pub fn spawn(
        &self,
        session: Session,
        experiment_id: &str,
        platform_kind: PlatformKind,
        platform: Arc<dyn ChatPlatform>,
        announcement: Option<String>,
        lexicon: Arc<TagLexicon>,
    ) -> std::io::Result<SessionInfo> {
        let state = session.state().clone();
        let info = Arc::new(RwLock::new(SessionInfo {
            session_id: state.session_id.clone(),
            experiment_id: experiment_id.to_string(),
            platform: platform_kind,
            state: state.clone(),
            final_record: None,
        }));
        let (tx, rx) = mpsc::channel();
        let worker = Worker {
            session,
            platform,
            info: info.clone(),
            clock: self.clock.clone(),
        };
        std::thread::Builder::new()
            .name(format!("session-{}", state.session_id))
            .spawn(move || worker.run(rx, announcement))?;
        let snapshot = info.read().clone();
        self.channels
            .write()
            .insert(state.channel_id.clone(), state.session_id.clone());
        self.sessions
            .write()
            .insert(state.session_id, Handle { info, tx, lexicon });
        Ok(snapshot)
    }

    pub fn info(&self, session_id: &str) -> Option<SessionInfo> {
        self.sessions.read().get(session_id).map(|h| h.info.read().clone())
    }

    pub fn list(&self) -> Vec<SessionInfo> {
        self.sessions.read().values().map(|h| h.info.read().clone()).collect()
    }

    pub fn lexicon(&self, session_id: &str) -> Option<Arc<TagLexicon>> {
        self.sessions.read().get(session_id).map(|h| h.lexicon.clone())
    }

    pub fn session_for_channel(&self, channel_id: &str) -> Option<String> {
        self.channels.read().get(channel_id).cloned()
    }

    fn sender(&self, session_id: &str) -> Result<(mpsc::Sender<Command>, Arc<RwLock<SessionInfo>>), ApiError> {
        let sessions = self.sessions.read();
        let h = sessions
            .get(session_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown session {session_id}")))?;
        Ok((h.tx.clone(), h.info.clone()))
    }

    fn ended(session_id: &str) -> ApiError {
        ApiError::new(
            axum::http::StatusCode::CONFLICT,
            "session_ended",
            format!("session {session_id} has ended"),
        )
    }

    /// Queues a message and waits for its outcome.
    pub async fn submit(&self, session_id: &str, msg: IncomingMessage) -> Result<Outcome, ApiError> {
        let (tx, _) = self.sender(session_id)?;
        let (reply, rx) = oneshot::channel();
        tx.send(Command::Incoming(msg, Some(reply)))
            .map_err(|_| Self::ended(session_id))?;
        rx.await.map_err(|_| Self::ended(session_id))?
    }

    /// Queues a message without waiting. Used by platform callbacks, which
    /// must be acknowledged quickly.
    pub fn enqueue(&self, session_id: &str, msg: IncomingMessage) -> Result<(), ApiError> {
        let (tx, _) = self.sender(session_id)?;
        tx.send(Command::Incoming(msg, None))
            .map_err(|_| Self::ended(session_id))
    }

    /// Ends the session manually. Ending an ended session returns its
    /// final record again.
    pub async fn stop(&self, session_id: &str) -> Result<FinalSessionRecord, ApiError> {
        let (tx, info) = self.sender(session_id)?;
        let (reply, rx) = oneshot::channel();
        let sent = tx.send(Command::End(reply)).is_ok();
        let result = if sent { rx.await.ok() } else { None };
        let record =
            match result {
                Some(r) => r?,
                // the worker has already exited, so the session is over
                None => info.read().final_record.clone().ok_or_else(|| {
                    ApiError::internal(format!("session {session_id} stopped without a final record"))
                })?,
            };
        self.release_channel(session_id);
        Ok(record)
    }

    fn release_channel(&self, session_id: &str) {
        self.channels.write().retain(|_, s| s != session_id);
    }

    /// Sends a tick to every live session whose deadline has passed.
    pub fn tick(&self, now: f64) {
        let mut finished = Vec::new();
        for (id, h) in self.sessions.read().iter() {
            let info = h.info.read();
            match info.state.status {
                SessionStatus::Ended => finished.push(id.clone()),
                _ if now >= info.state.deadline => {
                    let _ = h.tx.send(Command::Tick(now));
                }
                _ => {}
            }
        }
        for id in finished {
            self.release_channel(&id);
        }
    }

    /// Ends every live session of an experiment.
    pub async fn stop_experiment(&self, experiment_id: &str) -> Vec<Result<FinalSessionRecord, ApiError>> {
        let ids: Vec<String> = self
            .sessions
            .read()
            .iter()
            .filter(|(_, h)| {
                let info = h.info.read();
                info.experiment_id == experiment_id && info.state.status != SessionStatus::Ended
            })
            .map(|(id, _)| id.clone())
            .collect();
        let mut out = Vec::new();
        for id in ids {
            out.push(self.stop(&id).await);
        }
        out
    }
}
