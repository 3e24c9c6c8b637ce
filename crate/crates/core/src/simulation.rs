//! Offline replay of a scripted conversation through the full session
//! pipeline on a virtual clock.

use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, ManualClock};
use crate::embedding::HashEmbedder;
use crate::experiment::{persona_prompt, BackendKind, ExperimentConfig};
use crate::gateway::{ChatBackend, EchoBackend, Gateway, RetryPolicy, ScriptRule, ScriptedBackend};
use crate::orchestrator::{
    EndReason, FinalSessionRecord, Handled, IncomingMessage, Participant, Services, Session, SessionError, SessionInit,
    TaskSpec,
};
use crate::persistence::{encode_log, render_transcript, AnalyticsSnapshot, EventRecord, EventStore, MemoryEventStore};
use crate::persona::{CompileError, DescriptorTable};

/// Virtual time origin: 2024-01-01T00:00:00Z.
pub const SIMULATION_EPOCH: f64 = 1_704_067_200.0;
pub const SIMULATION_SESSION_ID: &str = "sim-1";
pub const SIMULATION_CHANNEL_ID: &str = "sim-channel";
pub const SIMULATION_BOT_ID: &str = "bot";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptParticipant {
    pub participant_id: String,
    pub display_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptLine {
    /// A declared participant id.
    pub speaker: String,
    pub text: String,
    pub at_offset_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScript {
    pub participants: Vec<ScriptParticipant>,
    pub lines: Vec<ScriptLine>,
    /// Replaces the experiment's scripted rules when non-empty.
    #[serde(default)]
    pub gateway_script: Vec<ScriptRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl SimulationScript {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.participants.is_empty() {
            errs.push("script declares no participants".into());
        }
        let mut ids = HashSet::new();
        for p in &self.participants {
            if p.participant_id.trim().is_empty() || p.display_name.trim().is_empty() {
                errs.push("participants need an id and a display name".into());
            }
            if p.participant_id == SIMULATION_BOT_ID {
                errs.push(format!("participant id `{SIMULATION_BOT_ID}` is reserved for the bot"));
            }
            if !ids.insert(p.participant_id.as_str()) {
                errs.push(format!("participant `{}` declared twice", p.participant_id));
            }
        }
        let mut last = 0.0f64;
        for (i, l) in self.lines.iter().enumerate() {
            let n = i + 1;
            if !ids.contains(l.speaker.as_str()) {
                errs.push(format!("line {n}: undeclared speaker `{}`", l.speaker));
            }
            if l.text.trim().is_empty() {
                errs.push(format!("line {n}: empty text"));
            }
            if !l.at_offset_seconds.is_finite() || l.at_offset_seconds < 0.0 {
                errs.push(format!("line {n}: offset must be a non-negative number"));
            } else if l.at_offset_seconds < last {
                errs.push(format!("line {n}: offsets must be non-decreasing"));
            } else {
                last = l.at_offset_seconds;
            }
        }
        errs
    }
}

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid script: {}", .0.join("; "))]
    Script(Vec<String>),
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

#[derive(Debug, Clone)]
pub struct SimStep {
    pub line: usize,
    pub timestamp: f64,
    pub handled: Handled,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub events: Vec<EventRecord>,
    pub steps: Vec<SimStep>,
    /// Lines that arrived after the session ended.
    pub rejected: usize,
    pub final_record: FinalSessionRecord,
    pub memory_log: String,
}

impl SimulationOutput {
    pub fn events_jsonl(&self) -> String {
        encode_log(SIMULATION_SESSION_ID, &self.events)
    }

    pub fn transcript(&self) -> String {
        render_transcript(&self.events)
    }

    pub fn analytics(&self) -> &AnalyticsSnapshot {
        &self.final_record.analytics
    }

    pub fn analytics_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self.analytics()).expect("snapshot serializes");
        s.push('\n');
        s
    }

    /// Writes `events.jsonl`, `transcript.txt`, `analytics.json` and
    /// `memory.jsonl` into `dir`, creating it if needed.
    pub fn write_to(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("events.jsonl"), self.events_jsonl())?;
        std::fs::write(dir.join("transcript.txt"), self.transcript())?;
        std::fs::write(dir.join("analytics.json"), self.analytics_json())?;
        std::fs::write(dir.join("memory.jsonl"), &self.memory_log)?;
        Ok(())
    }
}

/// Builds the offline backend selected by `config`. Remote backends are
/// refused.
pub fn offline_backend(
    config: &ExperimentConfig,
    script: &SimulationScript,
) -> Result<Arc<dyn ChatBackend>, SimulationError> {
    match config.gateway.backend {
        BackendKind::Echo => Ok(Arc::new(EchoBackend)),
        BackendKind::Scripted => {
            let rules = if script.gateway_script.is_empty() {
                config.gateway.script.clone()
            } else {
                script.gateway_script.clone()
            };
            let mut backend = ScriptedBackend::new(rules);
            if let Some(f) = script.fallback.as_ref().or(config.gateway.fallback.as_ref()) {
                backend = backend.with_fallback(f.clone());
            }
            Ok(Arc::new(backend))
        }
        BackendKind::Remote => Err(SimulationError::Config(vec![
            "simulation runs offline; choose the scripted or echo backend".into(),
        ])),
    }
}

/// Replays `script` against a fresh session configured by `config`.
/// Line offsets are seconds after [`SIMULATION_EPOCH`]; the same inputs
/// always give byte-identical outputs.
pub fn run_simulation(
    script: &SimulationScript,
    config: &ExperimentConfig,
    table: &DescriptorTable,
) -> Result<SimulationOutput, SimulationError> {
    let errs = script.validate();
    if !errs.is_empty() {
        return Err(SimulationError::Script(errs));
    }
    let mut errs = config.validate(table);
    errs.retain(|e| !e.starts_with("composition."));
    if !errs.is_empty() {
        return Err(SimulationError::Config(errs));
    }
    let backend = offline_backend(config, script)?;
    let clock = Arc::new(ManualClock::new(SIMULATION_EPOCH));
    let store = Arc::new(MemoryEventStore::new());
    let gateway = Gateway::new(backend, clock.clone()).with_policy(RetryPolicy {
        jitter: false,
        ..RetryPolicy::default()
    });
    let services = Services {
        embedder: Arc::new(HashEmbedder::default()),
        gateway: Arc::new(gateway),
        events: store.clone(),
        clock: clock.clone(),
        lexicon: Arc::new(config.tag_lexicon.clone()),
    };
    let mut participants: Vec<Participant> = script
        .participants
        .iter()
        .map(|p| Participant {
            participant_id: p.participant_id.clone(),
            display_name: p.display_name.clone(),
            is_bot: false,
        })
        .collect();
    participants.push(Participant {
        participant_id: SIMULATION_BOT_ID.into(),
        display_name: config.persona.name.trim().to_string(),
        is_bot: true,
    });
    let init = SessionInit {
        session_id: SIMULATION_SESSION_ID.into(),
        channel_id: SIMULATION_CHANNEL_ID.into(),
        participants,
        task: TaskSpec {
            title: config.task.title.clone(),
            instructions: config.task.instructions.clone(),
            context_documents: Vec::new(),
        },
        started_at: SIMULATION_EPOCH,
        deadline: SIMULATION_EPOCH + config.duration_seconds as f64,
        persona_prompt: persona_prompt(config, &[], table)?,
        settings: config.session_settings(),
        summarizer: None,
    };
    let (mut session, _) = Session::start(services, init)?;

    let mut steps = Vec::new();
    let mut rejected = 0;
    let mut last_ts = SIMULATION_EPOCH;
    for (i, line) in script.lines.iter().enumerate() {
        let ts = SIMULATION_EPOCH + line.at_offset_seconds;
        clock.set(ts);
        last_ts = ts;
        let speaker = script
            .participants
            .iter()
            .find(|p| p.participant_id == line.speaker)
            .expect("validated");
        let msg = IncomingMessage {
            channel_id: SIMULATION_CHANNEL_ID.into(),
            speaker_id: speaker.participant_id.clone(),
            display_name: speaker.display_name.clone(),
            content: line.text.clone(),
            timestamp: ts,
            platform_message_id: format!("line-{}", i + 1),
        };
        match session.handle_incoming(&msg) {
            Ok(handled) => steps.push(SimStep {
                line: i + 1,
                timestamp: ts,
                handled,
            }),
            Err(SessionError::Ended(_)) => rejected += 1,
            Err(e) => return Err(e.into()),
        }
    }
    let final_record = match session.final_record() {
        Some(r) => r.clone(),
        None => session.end_session(EndReason::Manual, last_ts.max(clock.now()))?,
    };
    let mut memory_log = Vec::new();
    session
        .memory()
        .write_log(&mut memory_log)
        .expect("writing to a Vec cannot fail");
    Ok(SimulationOutput {
        events: store.events(SIMULATION_SESSION_ID).map_err(SessionError::from)?,
        steps,
        rejected,
        final_record,
        memory_log: String::from_utf8(memory_log).expect("JSON is UTF-8"),
    })
}
