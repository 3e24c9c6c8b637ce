use std::sync::Arc;

use collab_core::persistence::{EventRecord, EventStore, NewEvent, PersistenceError};
use tokio::sync::broadcast;

/// Announces `(session_id, seq)` after every durable append so streams
/// can wake up instead of polling.
pub struct NotifyingStore {
    inner: Arc<dyn EventStore>,
    tx: broadcast::Sender<(String, u64)>,
}

impl NotifyingStore {
    pub fn new(inner: Arc<dyn EventStore>) -> Self {
        let (tx, _) = broadcast::channel(4096);
        Self { inner, tx }
    }

    pub fn subscribe(&self) -> broadcast::Receiver<(String, u64)> {
        self.tx.subscribe()
    }
}

impl EventStore for NotifyingStore {
    fn append(&self, session_id: &str, event: NewEvent) -> Result<EventRecord, PersistenceError> {
        let record = self.inner.append(session_id, event)?;
        // no subscribers is fine
        let _ = self.tx.send((session_id.to_string(), record.seq));
        Ok(record)
    }

    fn events(&self, session_id: &str) -> Result<Vec<EventRecord>, PersistenceError> {
        self.inner.events(session_id)
    }

    fn sessions(&self) -> Vec<String> {
        self.inner.sessions()
    }

    fn events_after(&self, session_id: &str, after_seq: u64) -> Result<Vec<EventRecord>, PersistenceError> {
        self.inner.events_after(session_id, after_seq)
    }

    fn is_ended(&self, session_id: &str) -> Result<bool, PersistenceError> {
        self.inner.is_ended(session_id)
    }
}
