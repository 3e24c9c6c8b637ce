//! Server push: the analytics event stream and the loopback chat socket.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::HeaderMap;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use collab_core::persistence::{compute_analytics, snapshots_after, EventKind, EventStore};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::{broadcast, mpsc};

use crate::api::{lexicon_for, loopback_message, ChatInput};
use crate::error::ApiError;
use crate::AppState;

pub fn routes() -> Router<Arc<AppState>> {
    Router::new()
        .route("/sessions/{id}/analytics/stream", get(analytics_stream))
        .route("/sessions/{id}/chat", get(chat))
}

#[derive(Deserialize)]
struct StreamQuery {
    #[serde(default)]
    from_seq: Option<u64>,
}

/// Waits until `session_id` gets a new event. Returns false when the store
/// is gone.
async fn wait_for(rx: &mut broadcast::Receiver<(String, u64)>, session_id: &str) -> bool {
    loop {
        match rx.recv().await {
            Ok((s, _)) if s == session_id => return true,
            Ok(_) => continue,
            // missed some; re-reading the log catches up
            Err(broadcast::error::RecvError::Lagged(_)) => return true,
            Err(broadcast::error::RecvError::Closed) => return false,
        }
    }
}

/// One `snapshot` event per persisted event after `from_seq` (or the
/// `Last-Event-ID` header), each equal to the batch analytics at that
/// seq. An ended session finishes with an `end` event carrying the final
/// snapshot.
async fn analytics_stream(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    state.store().events(&id)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    let from = q.from_seq.or(resume).unwrap_or(0);
    let lexicon = lexicon_for(&state, &id);
    let mut notify = state.store().subscribe();
    let (tx, rx) = mpsc::channel::<Event>(64);

    tokio::spawn(async move {
        let mut last = from;
        loop {
            let Ok(events) = state.store().events(&id) else { return };
            let fresh: Vec<u64> = events.iter().filter(|e| e.seq > last).map(|e| e.seq).collect();
            for (seq, snap) in fresh.iter().zip(snapshots_after(&id, &events, last, &lexicon)) {
                let ev = Event::default().event("snapshot").id(seq.to_string()).json_data(&snap);
                if tx.send(ev.expect("snapshots serialize")).await.is_err() {
                    return;
                }
                last = *seq;
            }
            if events.iter().any(|e| e.kind == EventKind::SessionEnd) {
                let fin = compute_analytics(&id, &events, &lexicon);
                let ev = Event::default()
                    .event("end")
                    .json_data(&fin)
                    .expect("snapshots serialize");
                let _ = tx.send(ev).await;
                return;
            }
            tokio::select! {
                alive = wait_for(&mut notify, &id) => if !alive { return },
                _ = tx.closed() => return,
            }
        }
    });

    let stream = futures::stream::unfold(rx, |mut rx| async move {
        rx.recv().await.map(|e| (Ok::<_, Infallible>(e), rx))
    });
    Ok(Sse::new(stream)
        .keep_alive(KeepAlive::new().interval(Duration::from_secs(15)))
        .into_response())
}

#[derive(Deserialize)]
struct ChatQuery {
    #[serde(default)]
    after_seq: u64,
}

/// Loopback chat over a WebSocket. Client frames are
/// `{"speaker_id", "content", "platform_message_id"?}`; the server pushes
/// every persisted event as `{"type":"event","event":{..}}` and answers
/// each client frame with an `outcome` or `error` frame.
async fn chat(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ChatQuery>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    if state.sessions().info(&id).is_none() {
        return Err(ApiError::not_found(format!("unknown session {id}")));
    }
    Ok(ws.on_upgrade(move |socket| chat_loop(state, id, q.after_seq, socket)))
}

async fn push_events(state: &AppState, id: &str, last: &mut u64, socket: &mut WebSocket) -> Result<bool, axum::Error> {
    let events = state.store().events_after(id, *last).unwrap_or_default();
    let mut ended = false;
    for e in events {
        *last = e.seq;
        ended |= e.kind == EventKind::SessionEnd;
        let frame = json!({ "type": "event", "event": e }).to_string();
        socket.send(Message::Text(frame.into())).await?;
    }
    Ok(ended)
}

async fn chat_loop(state: Arc<AppState>, id: String, after_seq: u64, mut socket: WebSocket) {
    let mut notify = state.store().subscribe();
    let mut last = after_seq;
    loop {
        match push_events(&state, &id, &mut last, &mut socket).await {
            Ok(true) => {
                let _ = socket.send(Message::Close(None)).await;
                return;
            }
            Ok(false) => {}
            Err(_) => return,
        }
        tokio::select! {
            alive = wait_for(&mut notify, &id) => if !alive { return },
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<ChatInput>(&text) {
                    Err(e) => json!({ "type": "error", "error": "validation", "message": e.to_string() }),
                    Ok(input) => {
                        let result = match loopback_message(&state, &id, input) {
                            Ok(msg) => state.sessions().submit(&id, msg).await,
                            Err(e) => Err(e),
                        };
                        match result {
                            Ok(out) => json!({ "type": "outcome", "outcome": out }),
                            Err(e) => json!({ "type": "error", "error": e.code, "message": e.message }),
                        }
                    }
                };
                if socket.send(Message::Text(reply.to_string().into())).await.is_err() {
                    return;
                }
            }
        }
    }
}
