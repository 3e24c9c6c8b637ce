//! Researcher-facing HTTP service: experiment management, team matching,
//! live sessions over the loopback or Slack adapters, and analytics
//! streaming. See `docs/api.md` for the wire format.

mod api;
pub mod auth;
pub mod config;
pub mod error;
pub mod sessions;
mod slack;
pub mod store;
mod stream;

use std::future::Future;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::extract::DefaultBodyLimit;
use axum::middleware;
use axum::routing::{get, post};
use axum::Router;
use collab_core::adapter::{ChatPlatform, Deduplicator, LoopbackPlatform, SlackClient};
use collab_core::clock::Clock;
use collab_core::embedding::{Embedder, HashEmbedder};
use collab_core::experiment::{BackendKind, ExperimentConfig, ExperimentRegistry};
use collab_core::gateway::{ChatBackend, EchoBackend, Gateway, RemoteBackend, ScriptedBackend};
use collab_core::orchestrator::{Services, Session};
use collab_core::persistence::{EventStore, FileEventStore, MemoryEventStore, ParticipantProfile, PersistenceError};
use collab_core::persona::DescriptorTable;
use parking_lot::{Mutex, RwLock};

pub use config::{ConfigError, Resolved, ServiceConfig, SlackConfig};
pub use error::ApiError;
pub use sessions::{Outcome, PlatformKind, SessionInfo};
pub use store::NotifyingStore;

const IDEMPOTENCY_CAP: usize = 4096;
const DEDUP_CAP: usize = 10_000;

struct SlackState {
    signing_secret: String,
    bot_token: String,
    bot_user_id: String,
    api_base_url: Option<String>,
    clock: Arc<dyn Clock>,
    // built lazily off the async runtime: the blocking client owns a runtime
    client: OnceLock<Arc<SlackClient>>,
    dedup: Mutex<Deduplicator>,
}

impl SlackState {
    fn client(&self) -> Arc<SlackClient> {
        self.client
            .get_or_init(|| {
                let mut c = SlackClient::new(self.bot_token.clone(), self.clock.clone());
                if let Some(url) = &self.api_base_url {
                    c = c.with_base_url(url.clone());
                }
                Arc::new(c)
            })
            .clone()
    }
}

/// Shared state of the service.
pub struct AppState {
    config: ServiceConfig,
    researcher_token: String,
    table: RwLock<Arc<DescriptorTable>>,
    registry: ExperimentRegistry,
    store: Arc<NotifyingStore>,
    clock: Arc<dyn Clock>,
    embedder: Arc<dyn Embedder>,
    loopback: Arc<LoopbackPlatform>,
    sessions: sessions::SessionManager,
    slack: Option<SlackState>,
    idempotency: auth::IdempotencyCache,
    // session id allocation and worker registration happen together
    start_lock: Mutex<()>,
}

/// Request to start one team's session.
pub struct StartRequest {
    pub experiment_id: String,
    pub team: Vec<ParticipantProfile>,
    pub channel_id: Option<String>,
    pub platform: PlatformKind,
}

impl AppState {
    pub fn new(
        config: ServiceConfig,
        resolved: Resolved,
        clock: Arc<dyn Clock>,
    ) -> Result<Arc<Self>, PersistenceError> {
        let inner: Arc<dyn EventStore> = match &config.data_dir {
            Some(dir) => Arc::new(FileEventStore::open(dir)?),
            None => Arc::new(MemoryEventStore::new()),
        };
        let slack = config.slack.as_ref().zip(resolved.slack).map(|(c, s)| SlackState {
            signing_secret: s.signing_secret,
            bot_token: s.bot_token,
            bot_user_id: c.bot_user_id.clone(),
            api_base_url: c.api_base_url.clone(),
            clock: clock.clone(),
            client: OnceLock::new(),
            dedup: Mutex::new(Deduplicator::new(DEDUP_CAP)),
        });
        Ok(Arc::new(Self {
            registry: ExperimentRegistry::new(config.document_cap_bytes),
            researcher_token: resolved.researcher_token,
            table: RwLock::new(Arc::new(resolved.table)),
            store: Arc::new(NotifyingStore::new(inner)),
            embedder: Arc::new(HashEmbedder::default()),
            loopback: Arc::new(LoopbackPlatform::new()),
            sessions: sessions::SessionManager::new(clock.clone()),
            clock,
            slack,
            idempotency: auth::IdempotencyCache::new(IDEMPOTENCY_CAP),
            start_lock: Mutex::new(()),
            config,
        }))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn researcher_token(&self) -> &str {
        &self.researcher_token
    }

    pub fn table(&self) -> Arc<DescriptorTable> {
        self.table.read().clone()
    }

    pub fn set_table(&self, table: DescriptorTable) {
        *self.table.write() = Arc::new(table);
    }

    pub fn registry(&self) -> &ExperimentRegistry {
        &self.registry
    }

    pub fn store(&self) -> &Arc<NotifyingStore> {
        &self.store
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn loopback(&self) -> &Arc<LoopbackPlatform> {
        &self.loopback
    }

    pub fn sessions(&self) -> &sessions::SessionManager {
        &self.sessions
    }

    pub(crate) fn idempotency(&self) -> &auth::IdempotencyCache {
        &self.idempotency
    }

    pub(crate) fn body_limit(&self) -> usize {
        self.config.document_cap_bytes.saturating_mul(2).saturating_add(1 << 20)
    }

    fn backend_for(&self, config: &ExperimentConfig) -> Result<Arc<dyn ChatBackend>, ApiError> {
        let g = &config.gateway;
        Ok(match self.config.backend.unwrap_or(g.backend) {
            BackendKind::Echo => Arc::new(EchoBackend),
            BackendKind::Scripted => {
                let mut b = ScriptedBackend::new(g.script.clone());
                if let Some(f) = &g.fallback {
                    b = b.with_fallback(f.clone());
                }
                Arc::new(b)
            }
            BackendKind::Remote => {
                let remote = g.remote.as_ref().or(self.config.remote.as_ref()).ok_or_else(|| {
                    ApiError::invalid(vec!["gateway.remote is required for the remote backend".into()])
                })?;
                Arc::new(RemoteBackend::from_config(remote).map_err(|e| ApiError::invalid(vec![e.to_string()]))?)
            }
        })
    }

    fn next_session_id(&self, experiment_id: &str) -> String {
        let taken = self.store.sessions();
        (1..)
            .map(|n| format!("{experiment_id}-s{n}"))
            .find(|id| !taken.contains(id) && !self.sessions.contains(id))
            .expect("unbounded range")
    }

    /// Starts a session for `req.team`. Blocking: run it off the async
    /// runtime, since remote clients are built here.
    pub fn start_session_blocking(&self, req: StartRequest) -> Result<SessionInfo, ApiError> {
        let experiment = self.registry.get(&req.experiment_id)?;
        let _serial = self.start_lock.lock();
        let session_id = self.next_session_id(&req.experiment_id);
        let channel_id = match (req.platform, req.channel_id) {
            (_, Some(c)) if !c.trim().is_empty() => c,
            (PlatformKind::Loopback, _) => format!("loopback-{session_id}"),
            (PlatformKind::Slack, _) => {
                return Err(ApiError::invalid(vec![
                    "channel_id is required for Slack sessions".into()
                ]));
            }
        };
        if self.sessions.channel_in_use(&channel_id) {
            return Err(ApiError::conflict(format!(
                "channel {channel_id} already hosts a live session"
            )));
        }
        let platform: Arc<dyn ChatPlatform> = match req.platform {
            PlatformKind::Loopback => self.loopback.clone(),
            PlatformKind::Slack => match &self.slack {
                Some(s) => s.client(),
                None => {
                    return Err(ApiError::invalid(vec![
                        "the service has no [slack] configuration".into()
                    ]))
                }
            },
        };
        let backend = self.backend_for(&experiment)?;
        let mut gateway = Gateway::new(backend, self.clock.clone());
        if let Some(t) = self.config.token_budget {
            gateway = gateway.with_token_budget(t);
        }
        let init = self.registry.prepare_session(
            &req.experiment_id,
            &req.team,
            &self.table(),
            (&session_id, &channel_id),
            &self.config.bot_participant_id,
            self.clock.now(),
        )?;
        let lexicon = Arc::new(experiment.tag_lexicon.clone());
        let services = Services {
            embedder: self.embedder.clone(),
            gateway: Arc::new(gateway),
            events: self.store.clone(),
            clock: self.clock.clone(),
            lexicon: lexicon.clone(),
        };
        let (session, announcement) = Session::start(services, init)?;
        if req.platform == PlatformKind::Loopback {
            self.loopback.open_channel(&channel_id);
        }
        self.sessions
            .spawn(
                session,
                &req.experiment_id,
                req.platform,
                platform,
                announcement,
                lexicon,
            )
            .map_err(|e| ApiError::internal(format!("cannot start session worker: {e}")))
    }

    pub async fn start_session(self: &Arc<Self>, req: StartRequest) -> Result<SessionInfo, ApiError> {
        let state = self.clone();
        tokio::task::spawn_blocking(move || state.start_session_blocking(req))
            .await
            .map_err(|e| ApiError::internal(e.to_string()))?
    }
}

/// The full HTTP router.
pub fn router(state: Arc<AppState>) -> Router {
    let v1 = api::routes()
        .merge(stream::routes())
        .layer(middleware::from_fn_with_state(state.clone(), auth::idempotency))
        .layer(middleware::from_fn_with_state(state.clone(), auth::require_token));
    Router::new()
        .route("/healthz/live", get(api::live))
        .route("/healthz/ready", get(api::ready))
        .route("/slack/events", post(slack::events))
        .nest("/v1", v1)
        .layer(DefaultBodyLimit::max(state.body_limit()))
        .with_state(state)
}

/// Fires deadline timers every `tick_millis`.
pub fn spawn_ticker(state: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    let period = Duration::from_millis(state.config.tick_millis.max(1));
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(period);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            interval.tick().await;
            state.sessions.tick(state.clock.now());
        }
    })
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let ticker = spawn_ticker(state.clone());
    let result = axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await;
    ticker.abort();
    result
}
