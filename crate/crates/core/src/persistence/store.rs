use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::events::{decode_log, EventKind, EventRecord, LogHeader, NewEvent, GENESIS_HASH};
use super::PersistenceError;

/// Append-only storage of per-session event logs.
pub trait EventStore: Send + Sync {
    /// Appends one event, assigning the next sequence number. The record is
    /// durable when this returns.
    fn append(&self, session_id: &str, event: NewEvent) -> Result<EventRecord, PersistenceError>;

    fn events(&self, session_id: &str) -> Result<Vec<EventRecord>, PersistenceError>;

    fn sessions(&self) -> Vec<String>;

    fn events_after(&self, session_id: &str, after_seq: u64) -> Result<Vec<EventRecord>, PersistenceError> {
        let mut all = self.events(session_id)?;
        all.retain(|e| e.seq > after_seq);
        Ok(all)
    }

    fn is_ended(&self, session_id: &str) -> Result<bool, PersistenceError> {
        Ok(self.events(session_id)?.iter().any(|e| e.kind == EventKind::SessionEnd))
    }
}

#[derive(Debug, Default)]
struct SessionLog {
    events: Vec<EventRecord>,
    ended: bool,
}

impl SessionLog {
    fn admit(&self, session_id: &str, event: &NewEvent) -> Result<(), PersistenceError> {
        if event.kind == EventKind::SessionStart && !self.events.is_empty() {
            return Err(PersistenceError::Lifecycle(format!(
                "session {session_id} already started"
            )));
        }
        if self.ended && !event.kind.allowed_after_end() {
            return Err(PersistenceError::SessionEnded(session_id.into()));
        }
        if !event.timestamp.is_finite() {
            return Err(PersistenceError::Lifecycle("timestamp must be finite".into()));
        }
        Ok(())
    }

    fn next(&self, session_id: &str, event: NewEvent) -> EventRecord {
        let prev = self.events.last().map_or(GENESIS_HASH, |e| e.hash.as_str());
        EventRecord::seal(session_id, self.events.len() as u64 + 1, prev, event)
    }

    fn push(&mut self, record: EventRecord) {
        if record.kind == EventKind::SessionEnd {
            self.ended = true;
        }
        self.events.push(record);
    }
}

type Logs = Mutex<HashMap<String, Arc<Mutex<SessionLog>>>>;

fn lookup(logs: &Logs, session_id: &str, event: &NewEvent) -> Result<Arc<Mutex<SessionLog>>, PersistenceError> {
    let mut map = logs.lock();
    match map.get(session_id) {
        Some(log) => Ok(Arc::clone(log)),
        None if event.kind == EventKind::SessionStart => {
            let log = Arc::new(Mutex::new(SessionLog::default()));
            map.insert(session_id.to_string(), Arc::clone(&log));
            Ok(log)
        }
        None => Err(PersistenceError::UnknownSession(session_id.into())),
    }
}

fn snapshot(logs: &Logs, session_id: &str) -> Result<Vec<EventRecord>, PersistenceError> {
    let log = logs
        .lock()
        .get(session_id)
        .cloned()
        .ok_or_else(|| PersistenceError::UnknownSession(session_id.into()))?;
    let events = log.lock().events.clone();
    Ok(events)
}

fn sorted_keys(logs: &Logs) -> Vec<String> {
    let mut ids: Vec<String> = logs.lock().keys().cloned().collect();
    ids.sort();
    ids
}

/// Volatile store, used by tests and simulations.
#[derive(Default)]
pub struct MemoryEventStore {
    logs: Logs,
}

impl MemoryEventStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl EventStore for MemoryEventStore {
    fn append(&self, session_id: &str, event: NewEvent) -> Result<EventRecord, PersistenceError> {
        let log = lookup(&self.logs, session_id, &event)?;
        let mut log = log.lock();
        log.admit(session_id, &event)?;
        let record = log.next(session_id, event);
        log.push(record.clone());
        Ok(record)
    }

    fn events(&self, session_id: &str) -> Result<Vec<EventRecord>, PersistenceError> {
        snapshot(&self.logs, session_id)
    }

    fn sessions(&self) -> Vec<String> {
        sorted_keys(&self.logs)
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    session_id: String,
    file: String,
}

/// One line-delimited file per session plus `index.jsonl` listing them.
pub struct FileEventStore {
    dir: PathBuf,
    logs: Logs,
    files: Mutex<HashMap<String, Arc<Mutex<File>>>>,
    index: Mutex<File>,
}

pub fn valid_session_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

fn write_durable(file: &mut File, line: &str) -> Result<(), PersistenceError> {
    file.write_all(line.as_bytes())?;
    file.write_all(b"\n")?;
    file.flush()?;
    file.sync_data()?;
    Ok(())
}

impl FileEventStore {
    /// Opens (or creates) a store rooted at `dir`, loading and verifying
    /// every indexed session log.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, PersistenceError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let index_path = dir.join("index.jsonl");
        let mut logs = HashMap::new();
        let mut files = HashMap::new();
        if index_path.exists() {
            for (i, line) in fs::read_to_string(&index_path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let entry: IndexEntry = serde_json::from_str(line)
                    .map_err(|e| PersistenceError::Corrupt(format!("index line {}: {e}", i + 1)))?;
                let path = dir.join(&entry.file);
                let (_, events) = decode_log(&fs::read_to_string(&path)?)?;
                let ended = events.iter().any(|e| e.kind == EventKind::SessionEnd);
                let file = OpenOptions::new().append(true).open(&path)?;
                files.insert(entry.session_id.clone(), Arc::new(Mutex::new(file)));
                logs.insert(entry.session_id, Arc::new(Mutex::new(SessionLog { events, ended })));
            }
        }
        let index = OpenOptions::new().create(true).append(true).open(&index_path)?;
        Ok(Self {
            dir,
            logs: Mutex::new(logs),
            files: Mutex::new(files),
            index: Mutex::new(index),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn session_path(&self, session_id: &str) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    fn file_for(&self, session_id: &str, creating: bool) -> Result<Arc<Mutex<File>>, PersistenceError> {
        let mut files = self.files.lock();
        if let Some(f) = files.get(session_id) {
            return Ok(Arc::clone(f));
        }
        if !creating {
            return Err(PersistenceError::UnknownSession(session_id.into()));
        }
        let path = self.session_path(session_id);
        let mut file = OpenOptions::new().create_new(true).append(true).open(&path)?;
        let header = serde_json::to_string(&LogHeader::new(session_id)).expect("header serializes");
        write_durable(&mut file, &header)?;
        let entry = IndexEntry {
            session_id: session_id.into(),
            file: format!("{session_id}.jsonl"),
        };
        write_durable(
            &mut self.index.lock(),
            &serde_json::to_string(&entry).expect("index entry serializes"),
        )?;
        let file = Arc::new(Mutex::new(file));
        files.insert(session_id.into(), Arc::clone(&file));
        Ok(file)
    }
}

impl EventStore for FileEventStore {
    fn append(&self, session_id: &str, event: NewEvent) -> Result<EventRecord, PersistenceError> {
        if !valid_session_id(session_id) {
            return Err(PersistenceError::Lifecycle(format!(
                "invalid session id `{session_id}`"
            )));
        }
        let log = lookup(&self.logs, session_id, &event)?;
        let mut log = log.lock();
        log.admit(session_id, &event)?;
        let file = self.file_for(session_id, log.events.is_empty())?;
        let record = log.next(session_id, event);
        let line = serde_json::to_string(&record).expect("event serializes");
        write_durable(&mut file.lock(), &line)?;
        log.push(record.clone());
        Ok(record)
    }

    fn events(&self, session_id: &str) -> Result<Vec<EventRecord>, PersistenceError> {
        snapshot(&self.logs, session_id)
    }

    fn sessions(&self) -> Vec<String> {
        sorted_keys(&self.logs)
    }
}
