//! Researcher-side experiment management: configuration and validation,
//! lifecycle, task documents, waiting pools and team matching, session
//! setup, and parameter sweeps.

mod matching;
mod sweep;

pub use matching::{match_teams, AgeBand, CompositionConstraints, MatchOutcome, PoolEntry};
pub use sweep::{sweep_parameters, SweepCell, SweepGrid, SweepRow};

use std::collections::BTreeMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{RemoteConfig, ScriptRule};
use crate::orchestrator::{
    LogicFilterConfig, ModelSettings, Participant, ReflectionPolicy, RetrievalSettings, SessionInit, SessionSettings,
    TaskSpec,
};
use crate::persistence::{ParticipantProfile, TagLexicon};
use crate::persona::{
    compile_system_prompt, validate_persona, CompileError, DescriptorTable, DocumentRef, PersonaSpec,
    DEFAULT_MAX_PROMPT_CHARS,
};

pub const DEFAULT_DOCUMENT_CAP: usize = 1 << 20;
const EXCERPT_CHARS: usize = 400;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("unknown experiment {0}")]
    NotFound(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("experiment {id} is {status:?}; cannot {operation}")]
    Status {
        id: String,
        status: ExperimentStatus,
        operation: &'static str,
    },
    #[error("document is {size} bytes, cap is {cap}")]
    DocumentTooLarge { size: usize, cap: usize },
    #[error("document is not plain UTF-8 text")]
    NotText,
    #[error("participant {0} is already waiting")]
    DuplicateParticipant(String),
    #[error("participant {0} is not in the pool")]
    NotInPool(String),
    #[error("team rejected: {0}")]
    Team(String),
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error("parameter grid is empty")]
    EmptyGrid,
    #[error("simulation failed: {0}")]
    Simulation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentStatus {
    Draft,
    Open,
    Running,
    Closed,
}

impl ExperimentStatus {
    /// Only draft -> open -> running -> closed, plus closing an open
    /// experiment that never ran.
    pub fn can_become(self, next: ExperimentStatus) -> bool {
        use ExperimentStatus::*;
        matches!(
            (self, next),
            (Draft, Open) | (Open, Running) | (Running, Closed) | (Open, Closed)
        )
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Scripted,
    Echo,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    #[serde(flatten)]
    pub model: ModelSettings,
    pub backend: BackendKind,
    /// Rules for the scripted backend.
    pub script: Vec<ScriptRule>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub remote: Option<RemoteConfig>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            model: ModelSettings::default(),
            backend: BackendKind::Scripted,
            script: Vec::new(),
            fallback: None,
            remote: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub title: String,
    pub instructions: String,
    pub context_document_ids: Vec<String>,
}

fn default_duration() -> u64 {
    1800
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Assigned on creation.
    #[serde(default)]
    pub experiment_id: String,
    pub persona: PersonaSpec,
    #[serde(default)]
    pub logic_filter: LogicFilterConfig,
    #[serde(default)]
    pub retrieval: RetrievalSettings,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub composition: CompositionConstraints,
    #[serde(default = "default_duration")]
    pub duration_seconds: u64,
    #[serde(default = "ExperimentConfig::default_status")]
    pub status: ExperimentStatus,
    #[serde(default)]
    pub reflection: ReflectionPolicy,
    #[serde(default = "ExperimentConfig::default_window")]
    pub transcript_window: usize,
    #[serde(default = "ExperimentConfig::default_budget")]
    pub prompt_token_budget: u64,
    #[serde(default = "ExperimentConfig::default_true")]
    pub memorize_bot_replies: bool,
    #[serde(default = "TagLexicon::starter")]
    pub tag_lexicon: TagLexicon,
}

impl ExperimentConfig {
    fn default_status() -> ExperimentStatus {
        ExperimentStatus::Draft
    }

    fn default_window() -> usize {
        SessionSettings::default().transcript_window
    }

    fn default_budget() -> u64 {
        SessionSettings::default().prompt_token_budget
    }

    fn default_true() -> bool {
        true
    }

    /// Defaults everywhere, with a neutral persona.
    pub fn minimal(persona_name: &str) -> Self {
        Self {
            experiment_id: String::new(),
            persona: PersonaSpec::neutral(persona_name),
            logic_filter: LogicFilterConfig::default(),
            retrieval: RetrievalSettings::default(),
            gateway: GatewayConfig::default(),
            task: TaskConfig::default(),
            composition: CompositionConstraints::default(),
            duration_seconds: default_duration(),
            status: ExperimentStatus::Draft,
            reflection: ReflectionPolicy::default(),
            transcript_window: Self::default_window(),
            prompt_token_budget: Self::default_budget(),
            memorize_bot_replies: true,
            tag_lexicon: TagLexicon::starter(),
        }
    }

    pub fn session_settings(&self) -> SessionSettings {
        SessionSettings {
            logic_filter: self.logic_filter.clone(),
            retrieval: self.retrieval,
            model: self.gateway.model.clone(),
            transcript_window: self.transcript_window,
            prompt_token_budget: self.prompt_token_budget,
            reflection: self.reflection,
            memorize_bot_replies: self.memorize_bot_replies,
        }
    }

    /// Every problem with the configuration, each naming its field.
    pub fn validate(&self, table: &DescriptorTable) -> Vec<String> {
        let mut errs: Vec<String> = validate_persona(&self.persona, table)
            .iter()
            .map(|f| format!("persona: {f}"))
            .collect();
        errs.extend(self.session_settings().validate());
        errs.extend(self.composition.validate());
        if self.duration_seconds == 0 {
            errs.push("duration_seconds must be positive".into());
        }
        if self.gateway.backend == BackendKind::Remote && self.gateway.remote.is_none() {
            errs.push("gateway.remote is required for the remote backend".into());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDocument {
    pub document_id: String,
    pub name: String,
    pub digest: String,
    pub size: usize,
    #[serde(skip)]
    pub text: String,
}

impl ContextDocument {
    pub fn reference(&self) -> DocumentRef {
        let excerpt: String = self.text.chars().take(EXCERPT_CHARS).collect();
        DocumentRef {
            document_id: self.document_id.clone(),
            name: self.name.clone(),
            digest: self.digest.clone(),
            excerpt: Some(excerpt).filter(|e| !e.trim().is_empty()),
        }
    }
}

/// Accepts UTF-8 text without NUL bytes, up to `cap` bytes.
pub fn check_document(bytes: &[u8], cap: usize) -> Result<&str, ExperimentError> {
    if bytes.len() > cap {
        return Err(ExperimentError::DocumentTooLarge { size: bytes.len(), cap });
    }
    let text = std::str::from_utf8(bytes).map_err(|_| ExperimentError::NotText)?;
    if text.contains('\0') {
        return Err(ExperimentError::NotText);
    }
    Ok(text)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Compiles the persona prompt with the task's documents attached.
pub fn persona_prompt(
    config: &ExperimentConfig,
    documents: &[ContextDocument],
    table: &DescriptorTable,
) -> Result<String, CompileError> {
    let mut spec = config.persona.clone();
    spec.context_documents
        .extend(documents.iter().map(ContextDocument::reference));
    compile_system_prompt(&spec, table, DEFAULT_MAX_PROMPT_CHARS)
}

/// Everything needed to start a session for `team`.
pub fn session_init(
    config: &ExperimentConfig,
    documents: &[ContextDocument],
    team: &[ParticipantProfile],
    table: &DescriptorTable,
    ids: (&str, &str),
    bot_participant_id: &str,
    now: f64,
) -> Result<SessionInit, ExperimentError> {
    config.composition.check_team(team).map_err(ExperimentError::Team)?;
    let (session_id, channel_id) = ids;
    let prompt = persona_prompt(config, documents, table)?;
    let mut participants: Vec<Participant> = team
        .iter()
        .map(|p| Participant {
            participant_id: p.participant_id.clone(),
            display_name: p.display_name.clone(),
            is_bot: false,
        })
        .collect();
    participants.push(Participant {
        participant_id: bot_participant_id.to_string(),
        display_name: config.persona.name.trim().to_string(),
        is_bot: true,
    });
    Ok(SessionInit {
        session_id: session_id.to_string(),
        channel_id: channel_id.to_string(),
        participants,
        task: TaskSpec {
            title: config.task.title.clone(),
            instructions: config.task.instructions.clone(),
            context_documents: documents.iter().map(ContextDocument::reference).collect(),
        },
        started_at: now,
        deadline: now + config.duration_seconds as f64,
        persona_prompt: prompt,
        settings: config.session_settings(),
        summarizer: None,
    })
}

#[derive(Debug, Clone)]
struct Entry {
    config: ExperimentConfig,
    documents: Vec<ContextDocument>,
    pool: Vec<PoolEntry>,
}

/// In-memory experiment store. One lock serializes all mutations, which
/// also makes pool take-and-assign atomic.
#[derive(Debug)]
pub struct ExperimentRegistry {
    inner: Mutex<RegistryInner>,
    document_cap: usize,
}

#[derive(Debug, Default)]
struct RegistryInner {
    experiments: BTreeMap<String, Entry>,
    next_experiment: u64,
    next_document: u64,
}

impl Default for ExperimentRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_DOCUMENT_CAP)
    }
}

impl ExperimentRegistry {
    pub fn new(document_cap: usize) -> Self {
        Self {
            inner: Mutex::new(RegistryInner::default()),
            document_cap,
        }
    }

    pub fn create(&self, mut config: ExperimentConfig, table: &DescriptorTable) -> Result<String, ExperimentError> {
        let errs = config.validate(table);
        if !errs.is_empty() {
            return Err(ExperimentError::Invalid(errs));
        }
        if !config.task.context_document_ids.is_empty() {
            return Err(ExperimentError::Invalid(vec![
                "task.context_document_ids must be empty on creation; upload documents afterwards".into(),
            ]));
        }
        let mut inner = self.inner.lock();
        inner.next_experiment += 1;
        let id = format!("exp-{}", inner.next_experiment);
        config.experiment_id = id.clone();
        config.status = ExperimentStatus::Draft;
        inner.experiments.insert(
            id.clone(),
            Entry {
                config,
                documents: Vec::new(),
                pool: Vec::new(),
            },
        );
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Result<ExperimentConfig, ExperimentError> {
        self.with(id, |e| Ok(e.config.clone()))
    }

    pub fn list(&self) -> Vec<ExperimentConfig> {
        self.inner
            .lock()
            .experiments
            .values()
            .map(|e| e.config.clone())
            .collect()
    }

    fn with<T>(
        &self,
        id: &str,
        f: impl FnOnce(&mut Entry) -> Result<T, ExperimentError>,
    ) -> Result<T, ExperimentError> {
        let mut inner = self.inner.lock();
        let entry = inner
            .experiments
            .get_mut(id)
            .ok_or_else(|| ExperimentError::NotFound(id.to_string()))?;
        f(entry)
    }

    /// Replaces the configuration of a draft experiment.
    pub fn update(
        &self,
        id: &str,
        mut config: ExperimentConfig,
        table: &DescriptorTable,
    ) -> Result<(), ExperimentError> {
        let errs = config.validate(table);
        if !errs.is_empty() {
            return Err(ExperimentError::Invalid(errs));
        }
        self.with(id, |e| {
            if e.config.status != ExperimentStatus::Draft {
                return Err(ExperimentError::Status {
                    id: id.to_string(),
                    status: e.config.status,
                    operation: "update",
                });
            }
            config.experiment_id = id.to_string();
            config.status = ExperimentStatus::Draft;
            config.task.context_document_ids = e.config.task.context_document_ids.clone();
            e.config = config;
            Ok(())
        })
    }

    pub fn transition(&self, id: &str, next: ExperimentStatus) -> Result<(), ExperimentError> {
        self.with(id, |e| {
            if e.config.status == next && next == ExperimentStatus::Running {
                return Ok(());
            }
            if !e.config.status.can_become(next) {
                return Err(ExperimentError::Status {
                    id: id.to_string(),
                    status: e.config.status,
                    operation: match next {
                        ExperimentStatus::Draft => "revert to draft",
                        ExperimentStatus::Open => "open",
                        ExperimentStatus::Running => "start a session",
                        ExperimentStatus::Closed => "close",
                    },
                });
            }
            e.config.status = next;
            Ok(())
        })
    }

    pub fn upload_document(&self, id: &str, name: &str, bytes: &[u8]) -> Result<DocumentRef, ExperimentError> {
        let text = check_document(bytes, self.document_cap)?.to_string();
        if name.trim().is_empty() {
            return Err(ExperimentError::Invalid(vec!["document name is empty".into()]));
        }
        let mut inner = self.inner.lock();
        inner.next_document += 1;
        let document_id = format!("doc-{}", inner.next_document);
        let entry = inner
            .experiments
            .get_mut(id)
            .ok_or_else(|| ExperimentError::NotFound(id.to_string()))?;
        if !matches!(entry.config.status, ExperimentStatus::Draft | ExperimentStatus::Open) {
            return Err(ExperimentError::Status {
                id: id.to_string(),
                status: entry.config.status,
                operation: "upload documents",
            });
        }
        let doc = ContextDocument {
            document_id: document_id.clone(),
            name: name.trim().to_string(),
            digest: sha256_hex(bytes),
            size: bytes.len(),
            text,
        };
        let reference = doc.reference();
        entry.config.task.context_document_ids.push(document_id);
        entry.documents.push(doc);
        Ok(reference)
    }

    pub fn documents(&self, id: &str) -> Result<Vec<ContextDocument>, ExperimentError> {
        self.with(id, |e| Ok(e.documents.clone()))
    }

    pub fn join_pool(&self, id: &str, profile: ParticipantProfile, now: f64) -> Result<usize, ExperimentError> {
        profile.validate().map_err(|m| ExperimentError::Invalid(vec![m]))?;
        self.with(id, |e| {
            if e.config.status == ExperimentStatus::Closed {
                return Err(ExperimentError::Status {
                    id: id.to_string(),
                    status: e.config.status,
                    operation: "join the pool",
                });
            }
            if e.pool.iter().any(|p| p.participant_id == profile.participant_id) {
                return Err(ExperimentError::DuplicateParticipant(profile.participant_id));
            }
            e.pool.push(PoolEntry {
                participant_id: profile.participant_id.clone(),
                profile,
                enqueued_at: now,
            });
            Ok(e.pool.len())
        })
    }

    pub fn leave_pool(&self, id: &str, participant_id: &str) -> Result<(), ExperimentError> {
        self.with(id, |e| {
            let before = e.pool.len();
            e.pool.retain(|p| p.participant_id != participant_id);
            if e.pool.len() == before {
                return Err(ExperimentError::NotInPool(participant_id.to_string()));
            }
            Ok(())
        })
    }

    pub fn pool(&self, id: &str) -> Result<Vec<PoolEntry>, ExperimentError> {
        self.with(id, |e| Ok(e.pool.clone()))
    }

    /// Forms teams from the pool and removes their members from it.
    pub fn take_teams(&self, id: &str) -> Result<Vec<Vec<PoolEntry>>, ExperimentError> {
        self.with(id, |e| {
            let out = match_teams(&e.pool, &e.config.composition);
            e.pool = out.residual;
            Ok(out.teams)
        })
    }

    /// Checks the experiment can start a session and builds its setup.
    /// The experiment moves to running on the first session.
    pub fn prepare_session(
        &self,
        id: &str,
        team: &[ParticipantProfile],
        table: &DescriptorTable,
        ids: (&str, &str),
        bot_participant_id: &str,
        now: f64,
    ) -> Result<SessionInit, ExperimentError> {
        self.with(id, |e| {
            if !matches!(e.config.status, ExperimentStatus::Open | ExperimentStatus::Running) {
                return Err(ExperimentError::Status {
                    id: id.to_string(),
                    status: e.config.status,
                    operation: "start a session",
                });
            }
            let init = session_init(&e.config, &e.documents, team, table, ids, bot_participant_id, now)?;
            e.config.status = ExperimentStatus::Running;
            Ok(init)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persistence::Demographics;

    fn table() -> DescriptorTable {
        DescriptorTable::default_table()
    }

    fn profile(id: &str) -> ParticipantProfile {
        ParticipantProfile {
            participant_id: id.into(),
            display_name: id.to_uppercase(),
            demographics: Demographics::default(),
            individual_measures: BTreeMap::new(),
            consent: true,
        }
    }

    #[test]
    fn minimal_config_is_created_as_draft() {
        let reg = ExperimentRegistry::default();
        let id = reg.create(ExperimentConfig::minimal("Sam"), &table()).unwrap();
        let got = reg.get(&id).unwrap();
        assert_eq!(
            (got.experiment_id.as_str(), got.status),
            (id.as_str(), ExperimentStatus::Draft)
        );
    }

    #[test]
    fn exhaustive_validation_names_fields() {
        let mut c = ExperimentConfig::minimal("");
        c.gateway.model.temperature = 3.0;
        c.composition = CompositionConstraints {
            team_size: 3,
            gender_targets: Some(BTreeMap::from([("F".into(), 1), ("M".into(), 1)])),
            age_bands: None,
        };
        c.duration_seconds = 0;
        let errs = c.validate(&table());
        assert_eq!(errs.len(), 4, "{errs:?}");
        assert!(errs.iter().any(|e| e.contains("temperature")));
        assert!(errs.iter().any(|e| e.contains("gender_targets")));
    }

    #[test]
    fn config_json_uses_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"persona":{"name":"Sam"}}"#).unwrap();
        assert_eq!(c, ExperimentConfig::minimal("Sam"));
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn status_transitions() {
        let reg = ExperimentRegistry::default();
        let id = reg.create(ExperimentConfig::minimal("Sam"), &table()).unwrap();
        assert!(reg.transition(&id, ExperimentStatus::Running).is_err());
        reg.transition(&id, ExperimentStatus::Open).unwrap();
        assert!(reg.transition(&id, ExperimentStatus::Draft).is_err());
        reg.transition(&id, ExperimentStatus::Closed).unwrap();
        assert!(reg.transition(&id, ExperimentStatus::Open).is_err());
    }

    #[test]
    fn documents_digest_and_caps() {
        let reg = ExperimentRegistry::new(1 << 20);
        let id = reg.create(ExperimentConfig::minimal("Sam"), &table()).unwrap();
        let body = "line of text\n".repeat(800);
        let a = reg.upload_document(&id, "brief.txt", body.as_bytes()).unwrap();
        let b = reg.upload_document(&id, "brief.txt", body.as_bytes()).unwrap();
        assert_eq!(a.digest, b.digest);
        assert_ne!(a.document_id, b.document_id);
        let big = vec![b'a'; 2 << 20];
        assert!(matches!(
            reg.upload_document(&id, "big.txt", &big),
            Err(ExperimentError::DocumentTooLarge { .. })
        ));
        assert!(matches!(
            reg.upload_document(&id, "bin", &[0xff, 0xfe]),
            Err(ExperimentError::NotText)
        ));
        assert!(matches!(
            reg.upload_document("nope", "x", b"x"),
            Err(ExperimentError::NotFound(_))
        ));
        assert_eq!(reg.get(&id).unwrap().task.context_document_ids.len(), 2);
    }

    #[test]
    fn session_needs_open_experiment_and_valid_team() {
        let reg = ExperimentRegistry::default();
        let mut c = ExperimentConfig::minimal("Sam");
        c.composition.team_size = 2;
        c.task.instructions = "Rank the items".into();
        let id = reg.create(c, &table()).unwrap();
        let team = [profile("a"), profile("b")];
        assert!(matches!(
            reg.prepare_session(&id, &team, &table(), ("s1", "c1"), "bot", 0.0),
            Err(ExperimentError::Status { .. })
        ));
        reg.transition(&id, ExperimentStatus::Open).unwrap();
        assert!(matches!(
            reg.prepare_session(&id, &team[..1], &table(), ("s1", "c1"), "bot", 0.0),
            Err(ExperimentError::Team(_))
        ));
        let init = reg
            .prepare_session(&id, &team, &table(), ("s1", "c1"), "bot", 100.0)
            .unwrap();
        assert_eq!(init.deadline, 100.0 + 1800.0);
        assert_eq!(init.participants.len(), 3);
        assert_eq!(reg.get(&id).unwrap().status, ExperimentStatus::Running);
        // a second team may start while running
        assert!(reg
            .prepare_session(&id, &team, &table(), ("s2", "c2"), "bot", 100.0)
            .is_ok());
    }

    #[test]
    fn pool_join_leave_and_take() {
        let reg = ExperimentRegistry::default();
        let mut c = ExperimentConfig::minimal("Sam");
        c.composition.team_size = 2;
        let id = reg.create(c, &table()).unwrap();
        for p in ["a", "b", "c"] {
            reg.join_pool(&id, profile(p), 0.0).unwrap();
        }
        assert!(matches!(
            reg.join_pool(&id, profile("a"), 0.0),
            Err(ExperimentError::DuplicateParticipant(_))
        ));
        reg.leave_pool(&id, "b").unwrap();
        assert!(reg.leave_pool(&id, "b").is_err());
        let teams = reg.take_teams(&id).unwrap();
        assert_eq!(teams.len(), 1);
        assert!(reg.pool(&id).unwrap().is_empty());
    }
}
