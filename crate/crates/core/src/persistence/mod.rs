//! Append-only session event logs, participant profiles, and the
//! analytics derived from them.
//!
//! On disk every session is one UTF-8 file of JSON lines: a header line
//! `{"schema":"collab-events","version":1,"session_id":...}` followed by one
//! [`EventRecord`] per line. `index.jsonl` lists the session files.

mod analytics;
mod events;
mod store;
mod tagging;

pub use analytics::{
    compute_analytics, participation_equity, percentile, snapshots_after, AnalyticsSnapshot, LatencyStats,
};
pub use events::{
    decode_log, encode_log, verify_chain, EventKind, EventRecord, LogHeader, NewEvent, EVENT_SCHEMA,
    EVENT_SCHEMA_VERSION, GENESIS_HASH,
};
pub use store::{valid_session_id, EventStore, FileEventStore, MemoryEventStore};
pub use tagging::{model_tag_pass, tag_behaviors, BehaviorTag, LexiconError, TagEntry, TagLexicon, TagProvenance};

use std::collections::BTreeMap;

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("session {0} has ended")]
    SessionEnded(String),
    #[error("lifecycle violation: {0}")]
    Lifecycle(String),
    #[error("corrupt event log: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Events,
    Transcript,
}

fn format_timestamp(ts: f64) -> String {
    let millis = (ts * 1000.0).round() as i64;
    DateTime::from_timestamp_millis(millis)
        .map(|d| d.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string())
        .unwrap_or_else(|| format!("{ts}"))
}

/// One `timestamp speaker: text` line per message and bot reply.
pub fn render_transcript(events: &[EventRecord]) -> String {
    let mut out = String::new();
    for e in events.iter().filter(|e| e.kind.is_utterance()) {
        let speaker = e.display_name().or(e.speaker_id.as_deref()).unwrap_or("system");
        out.push_str(&format!(
            "{} {}: {}\n",
            format_timestamp(e.timestamp),
            speaker,
            e.content().unwrap_or_default()
        ));
    }
    out
}

pub fn export_session(
    store: &dyn EventStore,
    session_id: &str,
    format: ExportFormat,
) -> Result<String, PersistenceError> {
    let events = store.events(session_id)?;
    Ok(match format {
        ExportFormat::Events => encode_log(session_id, &events),
        ExportFormat::Transcript => render_transcript(&events),
    })
}

/// Demographic and individual-difference data for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantProfile {
    pub participant_id: String,
    pub display_name: String,
    #[serde(default)]
    pub demographics: Demographics,
    /// Named numeric measures such as sense of belonging or self-efficacy.
    #[serde(default)]
    pub individual_measures: BTreeMap<String, f64>,
    #[serde(default)]
    pub consent: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demographics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub education: Option<String>,
}

impl ParticipantProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.participant_id.trim().is_empty() {
            return Err("participant_id is empty".into());
        }
        if let Some((name, _)) = self.individual_measures.iter().find(|(_, v)| !v.is_finite()) {
            return Err(format!("measure `{name}` is not finite"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn export_round_trip_and_transcript() {
        let store = MemoryEventStore::new();
        store
            .append(
                "s1",
                NewEvent::new(EventKind::SessionStart, 1_700_000_000.0, None, json!({})),
            )
            .unwrap();
        store
            .append(
                "s1",
                NewEvent::new(
                    EventKind::Message,
                    1_700_000_001.5,
                    Some("u1"),
                    json!({ "content": "hello team", "display_name": "Ann" }),
                ),
            )
            .unwrap();
        store
            .append(
                "s1",
                NewEvent::new(
                    EventKind::Suppression,
                    1_700_000_001.5,
                    None,
                    json!({ "reason": "below_threshold" }),
                ),
            )
            .unwrap();
        let doc = export_session(&store, "s1", ExportFormat::Events).unwrap();
        let (id, events) = decode_log(&doc).unwrap();
        assert_eq!(id, "s1");
        assert_eq!(encode_log(&id, &events), doc);
        let lex = TagLexicon::starter();
        assert_eq!(
            compute_analytics("s1", &events, &lex),
            compute_analytics("s1", &store.events("s1").unwrap(), &lex)
        );
        let transcript = export_session(&store, "s1", ExportFormat::Transcript).unwrap();
        assert_eq!(transcript, "2023-11-14T22:13:21.500Z Ann: hello team\n");
    }

    #[test]
    fn profile_validation() {
        let mut p = ParticipantProfile {
            participant_id: "p1".into(),
            display_name: "P".into(),
            demographics: Demographics::default(),
            individual_measures: BTreeMap::from([("self_efficacy".into(), 3.5)]),
            consent: true,
        };
        assert!(p.validate().is_ok());
        p.individual_measures.insert("belonging".into(), f64::NAN);
        assert!(p.validate().is_err());
    }
}
