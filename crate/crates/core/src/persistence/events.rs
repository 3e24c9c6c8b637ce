use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::PersistenceError;

pub const EVENT_SCHEMA: &str = "collab-events";
pub const EVENT_SCHEMA_VERSION: u32 = 1;

/// Hash carried by the first record of every session.
pub const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Message,
    BotReply,
    Suppression,
    Reflection,
    SessionStart,
    SessionEnd,
    PromptAudit,
    Feedback,
}

impl EventKind {
    /// Kinds that may still be appended after `session_end`.
    pub fn allowed_after_end(self) -> bool {
        matches!(self, EventKind::Feedback)
    }

    pub fn is_utterance(self) -> bool {
        matches!(self, EventKind::Message | EventKind::BotReply)
    }
}

/// One immutable entry of a session log. Each record stores the hash of
/// its predecessor and its own hash over every other field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub session_id: String,
    pub kind: EventKind,
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
    pub payload: Value,
    pub prev_hash: String,
    pub hash: String,
}

#[derive(Serialize)]
struct HashInput<'a> {
    seq: u64,
    session_id: &'a str,
    kind: EventKind,
    timestamp: f64,
    speaker_id: &'a Option<String>,
    payload: &'a Value,
    prev_hash: &'a str,
}

/// Fields supplied by the caller of an append.
#[derive(Debug, Clone, PartialEq)]
pub struct NewEvent {
    pub kind: EventKind,
    pub timestamp: f64,
    pub speaker_id: Option<String>,
    pub payload: Value,
}

impl NewEvent {
    pub fn new(kind: EventKind, timestamp: f64, speaker_id: Option<&str>, payload: Value) -> Self {
        Self {
            kind,
            timestamp,
            speaker_id: speaker_id.map(str::to_string),
            payload,
        }
    }
}

impl EventRecord {
    pub(crate) fn seal(session_id: &str, seq: u64, prev_hash: &str, new: NewEvent) -> Self {
        let mut record = EventRecord {
            seq,
            session_id: session_id.to_string(),
            kind: new.kind,
            timestamp: new.timestamp,
            speaker_id: new.speaker_id,
            payload: new.payload,
            prev_hash: prev_hash.to_string(),
            hash: String::new(),
        };
        record.hash = record.compute_hash();
        record
    }

    pub fn compute_hash(&self) -> String {
        let input = HashInput {
            seq: self.seq,
            session_id: &self.session_id,
            kind: self.kind,
            timestamp: self.timestamp,
            speaker_id: &self.speaker_id,
            payload: &self.payload,
            prev_hash: &self.prev_hash,
        };
        let bytes = serde_json::to_vec(&input).expect("event serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn payload_str(&self, field: &str) -> Option<&str> {
        self.payload.get(field).and_then(Value::as_str)
    }

    /// Message text for utterance events.
    pub fn content(&self) -> Option<&str> {
        self.payload_str("content")
    }

    pub fn display_name(&self) -> Option<&str> {
        self.payload_str("display_name")
    }
}

/// Checks gap-free sequencing from 1 and the hash chain.
pub fn verify_chain(events: &[EventRecord]) -> Result<(), PersistenceError> {
    let mut prev = GENESIS_HASH;
    for (i, e) in events.iter().enumerate() {
        let expected_seq = i as u64 + 1;
        if e.seq != expected_seq {
            return Err(PersistenceError::Corrupt(format!(
                "expected seq {expected_seq}, found {}",
                e.seq
            )));
        }
        if e.prev_hash != prev {
            return Err(PersistenceError::Corrupt(format!("broken hash chain at seq {}", e.seq)));
        }
        if e.compute_hash() != e.hash {
            return Err(PersistenceError::Corrupt(format!("record {} was modified", e.seq)));
        }
        prev = &e.hash;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub version: u32,
    pub session_id: String,
}

impl LogHeader {
    pub fn new(session_id: &str) -> Self {
        Self {
            schema: EVENT_SCHEMA.into(),
            version: EVENT_SCHEMA_VERSION,
            session_id: session_id.into(),
        }
    }
}

/// Serializes a session log: header line, then one record per line.
pub fn encode_log(session_id: &str, events: &[EventRecord]) -> String {
    let mut out = serde_json::to_string(&LogHeader::new(session_id)).expect("header serializes");
    out.push('\n');
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("event serializes"));
        out.push('\n');
    }
    out
}

/// Parses and verifies a document produced by [`encode_log`].
pub fn decode_log(document: &str) -> Result<(String, Vec<EventRecord>), PersistenceError> {
    let mut lines = document.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| PersistenceError::Corrupt("empty event log".into()))?;
    let header: LogHeader =
        serde_json::from_str(header).map_err(|e| PersistenceError::Corrupt(format!("line 1: bad header: {e}")))?;
    if header.schema != EVENT_SCHEMA || header.version != EVENT_SCHEMA_VERSION {
        return Err(PersistenceError::Corrupt(format!(
            "unsupported schema {} v{}",
            header.schema, header.version
        )));
    }
    let mut events = Vec::new();
    for (i, line) in lines {
        let e: EventRecord =
            serde_json::from_str(line).map_err(|err| PersistenceError::Corrupt(format!("line {}: {err}", i + 1)))?;
        if e.session_id != header.session_id {
            return Err(PersistenceError::Corrupt(format!(
                "line {}: record belongs to session {}",
                i + 1,
                e.session_id
            )));
        }
        events.push(e);
    }
    verify_chain(&events)?;
    Ok((header.session_id, events))
}
