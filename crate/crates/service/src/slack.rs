use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use collab_core::adapter::{parse_event, verify_signature, PlatformEvent};
use collab_core::orchestrator::IncomingMessage;
use serde_json::json;

use crate::error::ApiError;
use crate::AppState;

fn header<'a>(headers: &'a HeaderMap, name: &str) -> &'a str {
    headers.get(name).and_then(|v| v.to_str().ok()).unwrap_or_default()
}

/// Slack Events API callback. Unsigned, tampered or stale requests get
/// 401; anything verified is acknowledged with 200 so Slack does not
/// redeliver it.
pub async fn events(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let Some(slack) = &state.slack else {
        return ApiError::not_found("Slack is not configured").into_response();
    };
    let ts = header(&headers, "x-slack-request-timestamp");
    let sig = header(&headers, "x-slack-signature");
    let now = state.clock().now() as i64;
    if !verify_signature(ts, &body, sig, slack.signing_secret.as_bytes(), now) {
        return ApiError::new(
            StatusCode::UNAUTHORIZED,
            "bad_signature",
            "request signature did not verify",
        )
        .into_response();
    }
    let event = match parse_event(&body, &slack.bot_user_id) {
        Ok(Some(e)) => e,
        Ok(None) => return StatusCode::OK.into_response(),
        Err(e) => {
            tracing::warn!("dropping malformed Slack event: {e}");
            return StatusCode::OK.into_response();
        }
    };
    match event {
        PlatformEvent::VerificationChallenge { challenge } => Json(json!({ "challenge": challenge })).into_response(),
        PlatformEvent::Unsupported { kind, .. } => {
            tracing::debug!(%kind, "ignoring Slack event");
            StatusCode::OK.into_response()
        }
        PlatformEvent::MessageEvent(m) => {
            if !slack.dedup.lock().first_seen(&m.channel, &m.ts) {
                return StatusCode::OK.into_response();
            }
            let Some(session_id) = state.sessions().session_for_channel(&m.channel) else {
                tracing::debug!(channel = %m.channel, "no live session for channel");
                return StatusCode::OK.into_response();
            };
            let display_name = state
                .sessions()
                .info(&session_id)
                .and_then(|i| i.state.participant(&m.user).map(|p| p.display_name.clone()))
                .unwrap_or_else(|| m.user.clone());
            let msg = IncomingMessage {
                channel_id: m.channel.clone(),
                speaker_id: m.user.clone(),
                display_name,
                content: m.text.clone(),
                timestamp: m.timestamp_seconds().unwrap_or_else(|| state.clock().now()),
                platform_message_id: m.ts.clone(),
            };
            if let Err(e) = state.sessions().enqueue(&session_id, msg) {
                tracing::warn!(%session_id, "Slack message not delivered: {}", e.message);
            }
            StatusCode::OK.into_response()
        }
    }
}
