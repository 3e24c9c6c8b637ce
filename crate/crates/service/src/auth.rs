use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::Next;
use axum::response::{IntoResponse, Response};
use parking_lot::Mutex;
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::error::ApiError;
use crate::AppState;

pub const TOKEN_HEADER: &str = "x-researcher-token";
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";
pub const REPLAY_HEADER: &str = "idempotent-replay";

fn presented_token(req: &Request) -> Option<String> {
    let headers = req.headers();
    if let Some(v) = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()) {
        if let Some(t) = v.strip_prefix("Bearer ") {
            return Some(t.trim().to_string());
        }
    }
    if let Some(v) = headers.get(TOKEN_HEADER).and_then(|v| v.to_str().ok()) {
        return Some(v.trim().to_string());
    }
    // browsers cannot set headers on EventSource and WebSocket requests
    if req.method() == Method::GET {
        let query = req.uri().query().unwrap_or_default();
        for pair in query.split('&') {
            if let Some(t) = pair.strip_prefix("access_token=") {
                return Some(t.to_string());
            }
        }
    }
    None
}

/// Static researcher token check.
pub async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let ok = presented_token(&req)
        .map(|t| bool::from(t.as_bytes().ct_eq(state.researcher_token().as_bytes())))
        .unwrap_or(false);
    if !ok {
        return ApiError::new(
            StatusCode::UNAUTHORIZED,
            "unauthorized",
            "missing or wrong researcher token",
        )
        .into_response();
    }
    next.run(req).await
}

#[derive(Clone)]
struct Cached {
    fingerprint: [u8; 32],
    status: StatusCode,
    content_type: Option<HeaderValue>,
    body: Bytes,
}

type Slot = Arc<tokio::sync::Mutex<Option<Cached>>>;

/// Responses of mutating requests keyed by their idempotency key. A retry
/// with the same key and body gets the first response back; a concurrent
/// retry waits for the first to finish.
pub struct IdempotencyCache {
    slots: Mutex<(HashMap<String, Slot>, VecDeque<String>)>,
    cap: usize,
}

impl IdempotencyCache {
    pub fn new(cap: usize) -> Self {
        Self {
            slots: Mutex::new((HashMap::new(), VecDeque::new())),
            cap,
        }
    }

    fn slot(&self, key: &str) -> Slot {
        let mut guard = self.slots.lock();
        let (map, order) = &mut *guard;
        if let Some(s) = map.get(key) {
            return s.clone();
        }
        let slot = Slot::default();
        map.insert(key.to_string(), slot.clone());
        order.push_back(key.to_string());
        while order.len() > self.cap {
            if let Some(old) = order.pop_front() {
                map.remove(&old);
            }
        }
        slot
    }
}

fn is_mutating(m: &Method) -> bool {
    matches!(*m, Method::POST | Method::PUT | Method::PATCH | Method::DELETE)
}

pub async fn idempotency(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let key = req
        .headers()
        .get(IDEMPOTENCY_HEADER)
        .or_else(|| req.headers().get("x-request-id"))
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let Some(key) = key.filter(|_| is_mutating(req.method())) else {
        return next.run(req).await;
    };
    let (parts, body) = req.into_parts();
    let bytes = match axum::body::to_bytes(body, state.body_limit()).await {
        Ok(b) => b,
        Err(e) => return ApiError::new(StatusCode::PAYLOAD_TOO_LARGE, "too_large", e.to_string()).into_response(),
    };
    let mut h = Sha256::new();
    h.update(parts.method.as_str().as_bytes());
    h.update([0]);
    h.update(parts.uri.path().as_bytes());
    h.update([0]);
    h.update(&bytes);
    let fingerprint: [u8; 32] = h.finalize().into();

    let slot = state.idempotency().slot(&key);
    let mut entry = slot.lock().await;
    if let Some(c) = entry.as_ref() {
        if c.fingerprint != fingerprint {
            return ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "idempotency_key_reused",
                "idempotency key was already used for a different request",
            )
            .into_response();
        }
        let mut resp = Response::new(Body::from(c.body.clone()));
        *resp.status_mut() = c.status;
        if let Some(ct) = &c.content_type {
            resp.headers_mut().insert(header::CONTENT_TYPE, ct.clone());
        }
        resp.headers_mut()
            .insert(REPLAY_HEADER, HeaderValue::from_static("true"));
        return resp;
    }

    let resp = next.run(Request::from_parts(parts, Body::from(bytes))).await;
    let (parts, body) = resp.into_parts();
    let body = match axum::body::to_bytes(body, usize::MAX).await {
        Ok(b) => b,
        Err(e) => return ApiError::internal(e.to_string()).into_response(),
    };
    if !parts.status.is_server_error() {
        *entry = Some(Cached {
            fingerprint,
            status: parts.status,
            content_type: parts.headers.get(header::CONTENT_TYPE).cloned(),
            body: body.clone(),
        });
    }
    Response::from_parts(parts, Body::from(body))
}
