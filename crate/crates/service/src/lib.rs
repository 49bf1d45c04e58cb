//! HTTP gateway around the modality router.
//!
//! Endpoints:
//! - `POST /v1/respond` routes one instruction, optionally within a session
//! - `GET /v1/artifacts/{id}` serves stored media by content hash
//! - `POST /v1/sessions`, `GET /v1/sessions/{id}` manage transcripts
//! - `POST /v1/eval`, `GET /v1/eval/{job_id}` run benchmark jobs in the background

mod artifacts;
mod config;
mod jobs;
mod reqlog;
mod sessions;

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use modalgate_core::backends::{BackendSet, CallLog, ResolveError, SecretToken};
use modalgate_core::clock::{Clock, SystemClock};
use modalgate_core::eval::EvalSpec;
use modalgate_core::model::{read_corpus, CorpusError, Modality, RecordSource};
use modalgate_core::prompting::{ConversationHistory, Role};
use modalgate_core::router::{RouteErrorKind, RouteTrace, Router as ModalRouter, RouterConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub use artifacts::{is_artifact_id, ArtifactRef, ArtifactStore};
pub use config::{ServiceConfig, DEFAULT_RESPOND_TIMEOUT_SECS, SERVICE_TOKEN_ENV};
pub use jobs::{DuplicateJob, JobRegistry, JobState, JobStatus};
pub use reqlog::RequestLog;
pub use sessions::{is_session_id, Session, SessionStore, TranscriptTurn};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(#[from] ResolveError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> ServiceError + '_ {
    move |source| ServiceError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Shared state behind every handler.
pub struct AppState {
    config: ServiceConfig,
    router: ModalRouter,
    log: Arc<CallLog>,
    artifacts: ArtifactStore,
    sessions: SessionStore,
    jobs: JobRegistry,
    token: Option<SecretToken>,
    clock: Arc<dyn Clock>,
    request_log: RequestLog,
}

impl AppState {
    /// Resolves backends from the config. The bearer token, if any, comes
    /// from the environment.
    pub fn from_config(config: ServiceConfig) -> Result<Self, ServiceError> {
        let oracle = match &config.oracle_corpus {
            Some(path) => read_corpus(path, RecordSource::Human)?,
            None => Vec::new(),
        };
        let backends = BackendSet::resolve(
            &config.llm,
            config.image.as_deref(),
            config.speech.as_deref(),
            config.scorer.as_deref(),
            &oracle,
            config.references.as_deref(),
        )?;
        let token = std::env::var(SERVICE_TOKEN_ENV).ok().filter(|t| !t.is_empty()).map(SecretToken::new);
        Ok(Self::with_backends(config, backends)?.with_token(token))
    }

    pub fn with_backends(config: ServiceConfig, backends: BackendSet) -> Result<Self, ServiceError> {
        config.validate()?;
        let clock: Arc<dyn Clock> = Arc::new(SystemClock::default());
        let router = ModalRouter::from_backends(&backends)
            .with_config(RouterConfig {
                policy: config.policy,
                max_reasks: config.max_reasks,
                ..RouterConfig::default()
            })
            .with_clock(clock.clone());
        Ok(Self {
            artifacts: ArtifactStore::open(&config.artifact_dir).map_err(io_err(&config.artifact_dir))?,
            sessions: SessionStore::open(&config.session_dir).map_err(io_err(&config.session_dir))?,
            config,
            router,
            log: backends.log.clone(),
            jobs: JobRegistry::default(),
            token: None,
            clock,
            request_log: RequestLog::stderr(),
        })
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.router = self.router.with_clock(clock.clone());
        self.clock = clock;
        self
    }

    pub fn with_token(mut self, token: Option<SecretToken>) -> Self {
        self.token = token;
        self
    }

    pub fn with_request_log(mut self, log: RequestLog) -> Self {
        self.request_log = log;
        self
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    /// Log of every backend call made by the router.
    pub fn call_log(&self) -> &Arc<CallLog> {
        &self.log
    }

    pub fn artifacts(&self) -> &ArtifactStore {
        &self.artifacts
    }

    pub fn jobs(&self) -> &JobRegistry {
        &self.jobs
    }
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: json!({"error": message.into()}),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        tracing::error!(error = %e, "internal error");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

type Shared = State<Arc<AppState>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RespondRequest {
    #[serde(default)]
    session_id: Option<String>,
    instruction: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RespondResponse {
    pub modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_url: Option<String>,
    pub trace: RouteTrace,
}

async fn respond(State(app): Shared, body: Bytes) -> Result<Json<RespondResponse>, ApiError> {
    let req: RespondRequest = parse_body(&body)?;
    if req.instruction.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "instruction is empty"));
    }
    let lock = match &req.session_id {
        Some(id) if app.sessions.exists(id) => Some(app.sessions.lock(id)),
        Some(id) => return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}"))),
        None => None,
    };
    let _guard = match &lock {
        Some(l) => Some(l.lock().await),
        None => None,
    };
    let history = match &req.session_id {
        Some(id) => app
            .sessions
            .load(id)
            .map_err(ApiError::internal)?
            .map(|s| s.history(app.config.max_turns))
            .unwrap_or_default(),
        None => ConversationHistory::new(app.config.max_turns),
    };
    let requested_ms = app.clock.unix_millis();

    let timeout = app.config.respond_timeout();
    let routed = match tokio::time::timeout(timeout, app.router.route(&req.instruction, &history)).await {
        Err(_) => {
            return Err(ApiError::new(
                StatusCode::GATEWAY_TIMEOUT,
                format!("no response within {}s", timeout.as_secs_f64()),
            ))
        }
        Ok(Err(e)) => {
            let status = match e.kind {
                RouteErrorKind::EmptyInstruction | RouteErrorKind::Prompt(_) => StatusCode::BAD_REQUEST,
                _ => StatusCode::BAD_GATEWAY,
            };
            return Err(ApiError {
                status,
                body: json!({"error": e.kind.to_string(), "kind": e.kind, "trace": e.trace}),
            });
        }
        Ok(Ok(r)) => r,
    };

    let artifact_url = match &routed.artifact {
        Some(a) => Some(app.artifacts.put(a).map_err(ApiError::internal)?.url()),
        None => None,
    };
    if let Some(id) = &req.session_id {
        let user = TranscriptTurn {
            role: Role::User,
            text: req.instruction.clone(),
            modality: None,
            artifact_url: None,
            unix_ms: requested_ms,
        };
        let assistant = TranscriptTurn {
            role: Role::Assistant,
            text: routed.response().to_string(),
            modality: Some(routed.modality),
            artifact_url: artifact_url.clone(),
            unix_ms: app.clock.unix_millis(),
        };
        app.sessions
            .append_exchange(id, user, assistant)
            .map_err(ApiError::internal)?;
    }
    Ok(Json(RespondResponse {
        modality: routed.modality,
        text: routed.text,
        artifact_url,
        trace: routed.trace,
    }))
}

async fn get_artifact(State(app): Shared, Path(id): Path<String>) -> Result<Response, ApiError> {
    match app.artifacts.get(&id).map_err(ApiError::internal)? {
        None => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown artifact {id:?}"))),
        Some((bytes, mime)) => {
            let mut resp = bytes.into_response();
            let headers = resp.headers_mut();
            headers.insert(header::CONTENT_TYPE, HeaderValue::from_str(&mime).map_err(ApiError::internal)?);
            headers.insert(header::CACHE_CONTROL, HeaderValue::from_static("public, max-age=31536000, immutable"));
            Ok(resp)
        }
    }
}

async fn create_session(State(app): Shared) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let id = app.sessions.create(app.clock.unix_millis()).map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(json!({"id": id}))))
}

async fn get_session(State(app): Shared, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    app.sessions
        .load(&id)
        .map_err(ApiError::internal)?
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id:?}")))
}

async fn submit_eval(State(app): Shared, body: Bytes) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let mut spec: EvalSpec = parse_body(&body)?;
    let job_id = spec
        .job_id
        .clone()
        .unwrap_or_else(|| uuid::Uuid::new_v4().simple().to_string());
    if !is_session_id(&job_id) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "job_id must be 1-64 characters of [A-Za-z0-9_-]",
        ));
    }
    if app.jobs.contains(&job_id) {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("job {job_id:?} already exists")));
    }
    if spec.out_dir.is_none() {
        spec.out_dir = Some(app.config.eval_dir.join(&job_id));
    }
    let job = spec
        .into_job()
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    app.jobs
        .submit(&job_id, job)
        .map_err(|e| ApiError::new(StatusCode::CONFLICT, e.to_string()))?;
    Ok((StatusCode::ACCEPTED, Json(json!({"job_id": job_id}))))
}

async fn get_eval(State(app): Shared, Path(job_id): Path<String>) -> Result<Json<JobState>, ApiError> {
    app.jobs
        .get(&job_id)
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {job_id:?}")))
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

fn needs_auth(req: &Request) -> bool {
    let path = req.uri().path();
    // artifact URLs are embedded directly in <img>/<audio> tags, which cannot send headers
    path != "/healthz" && !path.starts_with("/v1/artifacts/") && req.method() != axum::http::Method::OPTIONS
}

async fn require_token(State(app): Shared, req: Request, next: Next) -> Response {
    if let (Some(token), true) = (&app.token, needs_auth(&req)) {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|v| v == token.expose());
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or invalid bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn log_request(State(app): Shared, req: Request, next: Next) -> Response {
    let started = std::time::Instant::now();
    let method = req.method().to_string();
    let path = req.uri().path().to_string();
    let resp = next.run(req).await;
    app.request_log.record(
        app.clock.unix_millis(),
        &method,
        &path,
        resp.status().as_u16(),
        started.elapsed(),
    );
    resp
}

/// The full HTTP application.
pub fn app(state: Arc<AppState>) -> axum::Router {
    axum::Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/respond", post(respond))
        .route("/v1/artifacts/{id}", get(get_artifact))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(get_session))
        .route("/v1/eval", post(submit_eval))
        .route("/v1/eval/{job_id}", get(get_eval))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .layer(middleware::from_fn_with_state(state.clone(), log_request))
        .layer(tower_http::cors::CorsLayer::permissive())
        .with_state(state)
}

/// Serves on an already-bound listener until `shutdown` resolves.
pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app(state)).with_graceful_shutdown(shutdown).await
}

/// Binds `host:port` from the config and serves until interrupted.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let addr = format!("{}:{}", config.host, config.port);
    let state = Arc::new(AppState::from_config(config)?);
    let listener = tokio::net::TcpListener::bind(&addr).await.map_err(|source| ServiceError::Io {
        path: addr.clone(),
        source,
    })?;
    let local: SocketAddr = listener.local_addr().map_err(|source| ServiceError::Io {
        path: addr.clone(),
        source,
    })?;
    tracing::info!(%local, "listening");
    serve_on(listener, state, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
    .map_err(|source| ServiceError::Io { path: addr, source })
}
