use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use collab_core::experiment::{sweep_parameters, ExperimentConfig, ExperimentStatus, SweepGrid, SweepRow};
use collab_core::orchestrator::{IncomingMessage, SessionStatus};
use collab_core::persistence::{
    compute_analytics, export_session, EventStore, ExportFormat, ParticipantProfile, TagLexicon,
};
use collab_core::persona::{compile_system_prompt, DescriptorTable, Level, PersonaSpec, DEFAULT_MAX_PROMPT_CHARS};
use collab_core::simulation::SimulationScript;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::ApiError;
use crate::sessions::PlatformKind;
use crate::{AppState, StartRequest};

type ApiResult<T> = Result<T, ApiError>;
type S = State<Arc<AppState>>;

fn body<T>(r: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    r.map(|Json(v)| v).map_err(|e| ApiError::invalid(vec![e.body_text()]))
}

pub fn routes() -> Router<Arc<AppState>> {
    Router::new()
        .route("/descriptor-table", get(get_table).put(put_table))
        .route("/experiments", get(list_experiments).post(create_experiment))
        .route("/experiments/{id}", get(get_experiment).put(update_experiment))
        .route("/experiments/{id}/open", post(open_experiment))
        .route("/experiments/{id}/close", post(close_experiment))
        .route("/experiments/{id}/documents", get(list_documents).post(upload_document))
        .route("/experiments/{id}/pool", get(get_pool).post(join_pool))
        .route("/experiments/{id}/pool/{participant_id}", delete(leave_pool))
        .route("/experiments/{id}/match", post(match_pool))
        .route("/experiments/{id}/sessions", post(start_session))
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/stop", post(stop_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/analytics", get(session_analytics))
        .route("/sessions/{id}/export", get(export))
        .route("/persona/compile", post(compile_persona))
        .route("/sweeps", post(run_sweep))
}

pub async fn live() -> Json<Value> {
    Json(json!({ "status": "live" }))
}

pub async fn ready(State(state): S) -> Json<Value> {
    let live = state
        .sessions()
        .list()
        .iter()
        .filter(|s| s.state.status == SessionStatus::Live)
        .count();
    Json(json!({
        "status": "ready",
        "descriptor_table_version": state.table().version(),
        "live_sessions": live,
    }))
}

// -- descriptor table

fn table_json(table: &DescriptorTable) -> Value {
    let facets: Vec<Value> = table
        .facets()
        .iter()
        .map(|k| {
            let descriptors: serde_json::Map<String, Value> = Level::ALL
                .iter()
                .map(|l| {
                    (
                        l.as_str().to_string(),
                        json!(table.descriptor(k, *l).unwrap_or_default()),
                    )
                })
                .collect();
            json!({ "trait": k.domain, "facet": k.facet, "descriptors": descriptors })
        })
        .collect();
    json!({ "version": table.version(), "text": table.serialize(), "facets": facets })
}

async fn get_table(State(state): S) -> Json<Value> {
    Json(table_json(&state.table()))
}

/// Replaces the table. The body is the table's text form.
async fn put_table(State(state): S, text: String) -> ApiResult<Json<Value>> {
    let table =
        DescriptorTable::parse(&text).map_err(|e| ApiError::invalid(e.0.iter().map(ToString::to_string).collect()))?;
    let out = table_json(&table);
    state.set_table(table);
    Ok(Json(out))
}

// -- experiments

#[derive(Serialize)]
struct ExperimentView {
    #[serde(flatten)]
    config: ExperimentConfig,
    documents: Vec<collab_core::persona::DocumentRef>,
    pool_size: usize,
}

fn view(state: &AppState, id: &str) -> ApiResult<ExperimentView> {
    let reg = state.registry();
    Ok(ExperimentView {
        config: reg.get(id)?,
        documents: reg.documents(id)?.iter().map(|d| d.reference()).collect(),
        pool_size: reg.pool(id)?.len(),
    })
}

async fn list_experiments(State(state): S) -> ApiResult<Json<Vec<ExperimentView>>> {
    let ids: Vec<String> = state.registry().list().into_iter().map(|c| c.experiment_id).collect();
    Ok(Json(ids.iter().map(|id| view(&state, id)).collect::<ApiResult<_>>()?))
}

async fn create_experiment(
    State(state): S,
    config: Result<Json<ExperimentConfig>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<ExperimentView>)> {
    let id = state.registry().create(body(config)?, &state.table())?;
    Ok((StatusCode::CREATED, Json(view(&state, &id)?)))
}

async fn get_experiment(State(state): S, Path(id): Path<String>) -> ApiResult<Json<ExperimentView>> {
    Ok(Json(view(&state, &id)?))
}

async fn update_experiment(
    State(state): S,
    Path(id): Path<String>,
    config: Result<Json<ExperimentConfig>, JsonRejection>,
) -> ApiResult<Json<ExperimentView>> {
    state.registry().update(&id, body(config)?, &state.table())?;
    Ok(Json(view(&state, &id)?))
}

async fn open_experiment(State(state): S, Path(id): Path<String>) -> ApiResult<Json<ExperimentView>> {
    state.registry().transition(&id, ExperimentStatus::Open)?;
    Ok(Json(view(&state, &id)?))
}

/// Closes the experiment and ends its live sessions.
async fn close_experiment(State(state): S, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    state.registry().transition(&id, ExperimentStatus::Closed)?;
    let ended: Vec<Value> = state
        .sessions()
        .stop_experiment(&id)
        .await
        .into_iter()
        .map(|r| match r {
            Ok(rec) => json!(rec),
            Err(e) => json!({ "error": e.message }),
        })
        .collect();
    Ok(Json(
        json!({ "experiment": view(&state, &id)?, "ended_sessions": ended }),
    ))
}

#[derive(Deserialize)]
struct DocumentQuery {
    name: String,
}

/// Raw document bytes in the body, the file name in `?name=`.
async fn upload_document(
    State(state): S,
    Path(id): Path<String>,
    Query(q): Query<DocumentQuery>,
    bytes: Bytes,
) -> ApiResult<(StatusCode, Json<collab_core::persona::DocumentRef>)> {
    let doc = state.registry().upload_document(&id, &q.name, &bytes)?;
    Ok((StatusCode::CREATED, Json(doc)))
}

async fn list_documents(State(state): S, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let docs: Vec<_> = state.registry().documents(&id)?.iter().map(|d| d.reference()).collect();
    Ok(Json(json!(docs)))
}

// -- pool and sessions

async fn get_pool(State(state): S, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(state.registry().pool(&id)?)))
}

async fn join_pool(
    State(state): S,
    Path(id): Path<String>,
    profile: Result<Json<ParticipantProfile>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let now = state.clock().now();
    let position = state.registry().join_pool(&id, body(profile)?, now)?;
    Ok((StatusCode::CREATED, Json(json!({ "position": position }))))
}

async fn leave_pool(State(state): S, Path((id, pid)): Path<(String, String)>) -> ApiResult<StatusCode> {
    state.registry().leave_pool(&id, &pid)?;
    Ok(StatusCode::NO_CONTENT)
}

/// Forms every team the pool allows and starts a loopback session for each.
async fn match_pool(State(state): S, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let reg = state.registry();
    if reg.get(&id)?.status == ExperimentStatus::Draft {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "status",
            format!("experiment {id} is Draft; cannot match"),
        ));
    }
    let teams = reg.take_teams(&id)?;
    let (mut started, mut errors) = (Vec::new(), Vec::new());
    for team in teams {
        let req = StartRequest {
            experiment_id: id.clone(),
            team: team.iter().map(|e| e.profile.clone()).collect(),
            channel_id: None,
            platform: PlatformKind::Loopback,
        };
        match state.start_session(req).await {
            Ok(info) => started.push(info),
            Err(e) => {
                // back into the pool, behind anyone who joined meanwhile
                for entry in team {
                    let _ = reg.join_pool(&id, entry.profile, entry.enqueued_at);
                }
                errors.push(e.message);
            }
        }
    }
    Ok(Json(
        json!({ "sessions": started, "residual": reg.pool(&id)?.len(), "errors": errors }),
    ))
}

#[derive(Deserialize)]
struct StartBody {
    #[serde(default)]
    team: Option<Vec<ParticipantProfile>>,
    /// Alternative to `team`: members taken from the waiting pool.
    #[serde(default)]
    participant_ids: Option<Vec<String>>,
    #[serde(default)]
    channel_id: Option<String>,
    #[serde(default)]
    platform: PlatformKind,
}

async fn start_session(
    State(state): S,
    Path(id): Path<String>,
    req: Result<Json<StartBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let req = body(req)?;
    let (team, from_pool) = match (req.team, req.participant_ids) {
        (Some(team), None) => (team, Vec::new()),
        (None, Some(ids)) => {
            let pool = state.registry().pool(&id)?;
            let mut team = Vec::new();
            for pid in &ids {
                let entry = pool
                    .iter()
                    .find(|e| &e.participant_id == pid)
                    .ok_or_else(|| ApiError::not_found(format!("participant {pid} is not in the pool")))?;
                team.push(entry.profile.clone());
            }
            (team, ids)
        }
        _ => {
            return Err(ApiError::invalid(vec![
                "give exactly one of team and participant_ids".into()
            ]))
        }
    };
    let info = state
        .start_session(StartRequest {
            experiment_id: id.clone(),
            team,
            channel_id: req.channel_id,
            platform: req.platform,
        })
        .await?;
    for pid in from_pool {
        let _ = state.registry().leave_pool(&id, &pid);
    }
    Ok((StatusCode::CREATED, Json(json!(info))))
}

#[derive(Serialize)]
struct SessionSummary {
    session_id: String,
    experiment_id: Option<String>,
    channel_id: Option<String>,
    /// `archived` for logs found on disk that no worker owns.
    status: String,
}

async fn list_sessions(State(state): S) -> Json<Vec<SessionSummary>> {
    let mut out: Vec<SessionSummary> = state
        .sessions()
        .list()
        .into_iter()
        .map(|i| SessionSummary {
            session_id: i.session_id,
            experiment_id: Some(i.experiment_id),
            channel_id: Some(i.state.channel_id),
            status: json!(i.state.status).as_str().unwrap_or_default().to_string(),
        })
        .collect();
    for id in state.store().sessions() {
        if !state.sessions().contains(&id) {
            out.push(SessionSummary {
                session_id: id,
                experiment_id: None,
                channel_id: None,
                status: "archived".into(),
            });
        }
    }
    Json(out)
}

async fn get_session(State(state): S, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let info = state
        .sessions()
        .info(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown session {id}")))?;
    Ok(Json(json!(info)))
}

async fn stop_session(State(state): S, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(json!(state.sessions().stop(&id).await?)))
}

#[derive(Deserialize)]
pub(crate) struct ChatInput {
    pub speaker_id: String,
    pub content: String,
    #[serde(default)]
    pub platform_message_id: Option<String>,
}

/// Builds the orchestrator message for a loopback post. The server clock
/// stamps it; client clocks are not trusted.
pub(crate) fn loopback_message(state: &AppState, session_id: &str, input: ChatInput) -> ApiResult<IncomingMessage> {
    let info = state
        .sessions()
        .info(session_id)
        .ok_or_else(|| ApiError::not_found(format!("unknown session {session_id}")))?;
    if info.platform != PlatformKind::Loopback {
        return Err(ApiError::conflict(format!(
            "session {session_id} is not a loopback session"
        )));
    }
    let display_name = info
        .state
        .participant(&input.speaker_id)
        .map(|p| p.display_name.clone())
        .unwrap_or_default();
    Ok(IncomingMessage {
        channel_id: info.state.channel_id,
        speaker_id: input.speaker_id,
        display_name,
        content: input.content,
        timestamp: state.clock().now(),
        platform_message_id: input
            .platform_message_id
            .unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
    })
}

async fn post_message(
    State(state): S,
    Path(id): Path<String>,
    input: Result<Json<ChatInput>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let msg = loopback_message(&state, &id, body(input)?)?;
    Ok(Json(json!(state.sessions().submit(&id, msg).await?)))
}

#[derive(Deserialize)]
struct AfterQuery {
    #[serde(default)]
    after_seq: u64,
}

async fn session_events(
    State(state): S,
    Path(id): Path<String>,
    Query(q): Query<AfterQuery>,
) -> ApiResult<Json<Value>> {
    Ok(Json(json!(state.store().events_after(&id, q.after_seq)?)))
}

pub(crate) fn lexicon_for(state: &AppState, session_id: &str) -> Arc<TagLexicon> {
    state
        .sessions()
        .lexicon(session_id)
        .unwrap_or_else(|| Arc::new(TagLexicon::starter()))
}

async fn session_analytics(State(state): S, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let events = state.store().events(&id)?;
    Ok(Json(json!(compute_analytics(&id, &events, &lexicon_for(&state, &id)))))
}

#[derive(Deserialize)]
struct ExportQuery {
    #[serde(default = "default_format")]
    format: ExportFormat,
}

fn default_format() -> ExportFormat {
    ExportFormat::Events
}

async fn export(State(state): S, Path(id): Path<String>, Query(q): Query<ExportQuery>) -> ApiResult<Response> {
    let text = export_session(state.store().as_ref(), &id, q.format)?;
    let (ct, ext) = match q.format {
        ExportFormat::Events => ("application/x-ndjson", "jsonl"),
        ExportFormat::Transcript => ("text/plain; charset=utf-8", "txt"),
    };
    let disposition = format!("attachment; filename=\"{id}.{ext}\"");
    Ok((
        [
            (header::CONTENT_TYPE, ct.to_string()),
            (header::CONTENT_DISPOSITION, disposition),
        ],
        text,
    )
        .into_response())
}

// -- persona preview and sweeps

async fn compile_persona(State(state): S, spec: Result<Json<PersonaSpec>, JsonRejection>) -> ApiResult<Json<Value>> {
    let table = state.table();
    let prompt = compile_system_prompt(&body(spec)?, &table, DEFAULT_MAX_PROMPT_CHARS)?;
    Ok(Json(json!({
        "table_version": table.version(),
        "characters": prompt.chars().count(),
        "prompt": prompt,
    })))
}

#[derive(Deserialize)]
struct SweepBody {
    /// Base configuration; alternatively `experiment_id`.
    #[serde(default)]
    base: Option<ExperimentConfig>,
    #[serde(default)]
    experiment_id: Option<String>,
    grid: SweepGrid,
    fixture: SimulationScript,
}

async fn run_sweep(State(state): S, req: Result<Json<SweepBody>, JsonRejection>) -> ApiResult<Json<Vec<SweepRow>>> {
    let req = body(req)?;
    let base = match (req.base, req.experiment_id) {
        (Some(b), None) => b,
        (None, Some(id)) => state.registry().get(&id)?,
        _ => {
            return Err(ApiError::invalid(vec![
                "give exactly one of base and experiment_id".into()
            ]))
        }
    };
    let table = state.table();
    let rows = tokio::task::spawn_blocking(move || sweep_parameters(&base, &req.grid, &req.fixture, &table))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok(Json(rows))
}
