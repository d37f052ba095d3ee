//! HTTP and WebSocket front end for the co-pilot pipeline.
//!
//! | method | path                      | body / query        | reply                       |
//! |--------|---------------------------|---------------------|-----------------------------|
//! | POST   | `/api/v1/instruction`     | `{session, text}`   | the interaction record      |
//! | GET    | `/api/v1/status`          |                     | current vehicle status      |
//! | GET    | `/api/v1/log`             | `?session=<id>`     | the session's records       |
//! | GET    | `/api/v1/telemetry` (WS)  |                     | one status frame per period |
//!
//! Errors are JSON objects `{"error": "..."}` with a 4xx or 5xx status.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::mpsc::RecvTimeoutError;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use avcopilot_core::assets;
use avcopilot_core::interface::InterfaceNode;
use avcopilot_core::log::{LogError, LogStore};
use avcopilot_core::pipeline::{InteractionRecord, Pipeline, PipelineConfig, PipelineError};
use avcopilot_core::registry::ActionRegistry;
use avcopilot_core::sim::{KernelOptions, Pacing, RouteMap, SimConfig, SimHandle, Simulation};
use avcopilot_core::translator::{Ablation, Backend, FeedbackTemplates, HttpBackend, HttpConfig, RuleBackend, ENDPOINT_ENV};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Rule,
    Http,
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rule" => Ok(BackendKind::Rule),
            "http" => Ok(BackendKind::Http),
            other => Err(format!("unknown backend {other:?}; expected rule or http")),
        }
    }
}

pub fn make_backend(kind: BackendKind) -> anyhow::Result<Arc<dyn Backend>> {
    Ok(match kind {
        BackendKind::Rule => Arc::new(RuleBackend::shipped()),
        BackendKind::Http => {
            let config = HttpConfig::from_env().with_context(|| format!("the http backend needs {ENDPOINT_ENV} set"))?;
            Arc::new(HttpBackend::new(config))
        }
    })
}

/// Everything needed to stand up a live pipeline.
pub struct ServiceOptions {
    pub map: String,
    pub registry: String,
    pub backend: Arc<dyn Backend>,
    pub ablation: Ablation,
    pub log_dir: Option<PathBuf>,
    pub pacing: Pacing,
}

impl ServiceOptions {
    /// Shipped map and registry with the rule backend, real-time pacing.
    pub fn shipped() -> Self {
        ServiceOptions {
            map: assets::DEFAULT_MAP.to_string(),
            registry: assets::DEFAULT_REGISTRY.to_string(),
            backend: Arc::new(RuleBackend::shipped()),
            ablation: Ablation::Baseline,
            log_dir: None,
            pacing: Pacing::RealTime,
        }
    }
}

/// Parses the inputs, checks them against each other and starts the kernel.
pub fn build_pipeline(opts: ServiceOptions) -> anyhow::Result<Arc<Pipeline>> {
    let map = Arc::new(RouteMap::parse(&opts.map).context("parsing map")?);
    let registry = ActionRegistry::parse(&opts.registry).context("parsing registry")?;
    registry.check_against_map(&map).context("registry does not fit the map")?;
    let registry = Arc::new(registry);
    let templates = FeedbackTemplates::parse(assets::TEMPLATES).context("parsing feedback templates")?;

    let sim = Simulation::new(map, SimConfig::default()).context("starting simulation")?;
    let handle = SimHandle::spawn(sim, KernelOptions { pacing: opts.pacing, ..Default::default() });
    let config = PipelineConfig::shipped(&registry, opts.ablation);
    let mut pipeline = Pipeline::new(InterfaceNode::new(registry, handle), opts.backend, templates, config);
    if let Some(dir) = opts.log_dir {
        let store = LogStore::open(&dir).with_context(|| format!("opening log directory {}", dir.display()))?;
        pipeline = pipeline.with_log(Arc::new(store));
    }
    Ok(Arc::new(pipeline))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstructionRequest {
    pub session: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApiError {
    pub error: String,
}

struct Failure(StatusCode, String);

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        (self.0, Json(ApiError { error: self.1 })).into_response()
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::EmptyInstruction(_)
            | PipelineError::InvalidSession(_)
            | PipelineError::Log(LogError::InvalidSession(_)) => StatusCode::BAD_REQUEST,
            PipelineError::Log(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Failure(status, e.to_string())
    }
}

fn join_failure(e: tokio::task::JoinError) -> Failure {
    Failure(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"))
}

pub fn router(pipeline: Arc<Pipeline>) -> Router {
    Router::new()
        .route("/api/v1/instruction", post(post_instruction))
        .route("/api/v1/status", get(get_status))
        .route("/api/v1/log", get(get_log))
        .route("/api/v1/telemetry", get(telemetry))
        .with_state(pipeline)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, pipeline: Arc<Pipeline>) -> std::io::Result<()> {
    axum::serve(listener, router(pipeline)).await
}

async fn post_instruction(
    State(pipeline): State<Arc<Pipeline>>,
    Json(req): Json<InstructionRequest>,
) -> Result<Json<InteractionRecord>, Failure> {
    // The pipeline blocks on the backend and the kernel.
    let record = tokio::task::spawn_blocking(move || pipeline.submit(&req.session, &req.text))
        .await
        .map_err(join_failure)??;
    Ok(Json(record))
}

async fn get_status(State(pipeline): State<Arc<Pipeline>>) -> Result<Response, Failure> {
    let snap = tokio::task::spawn_blocking(move || pipeline.sim().snapshot())
        .await
        .map_err(join_failure)?
        .map_err(|e| Failure(StatusCode::SERVICE_UNAVAILABLE, e.to_string()))?;
    Ok(Json(snap).into_response())
}

#[derive(Debug, Deserialize)]
struct LogQuery {
    session: String,
}

async fn get_log(
    State(pipeline): State<Arc<Pipeline>>,
    Query(q): Query<LogQuery>,
) -> Result<Json<Vec<InteractionRecord>>, Failure> {
    let records = tokio::task::spawn_blocking(move || pipeline.records(&q.session))
        .await
        .map_err(join_failure)??;
    Ok(Json(records))
}

async fn telemetry(State(pipeline): State<Arc<Pipeline>>, ws: WebSocketUpgrade) -> Response {
    ws.on_upgrade(move |socket| stream_telemetry(socket, pipeline))
}

/// Frames buffered per client before new ones are dropped.
const CLIENT_BUFFER: usize = 64;

async fn stream_telemetry(mut socket: WebSocket, pipeline: Arc<Pipeline>) {
    let feed = pipeline.telemetry();
    let (tx, mut rx) = mpsc::channel(CLIENT_BUFFER);
    // Bridge the kernel's std channel; exits once the client is gone.
    tokio::task::spawn_blocking(move || loop {
        match feed.recv_timeout(Duration::from_millis(250)) {
            Ok(frame) => {
                if let Err(mpsc::error::TrySendError::Closed(_)) = tx.try_send(frame) {
                    break;
                }
            }
            Err(RecvTimeoutError::Timeout) if tx.is_closed() => break,
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    });
    loop {
        tokio::select! {
            frame = rx.recv() => {
                let Some(frame) = frame else { break };
                let text = match serde_json::to_string(&frame) {
                    Ok(t) => t,
                    Err(e) => {
                        tracing::warn!(error = %e, "telemetry frame not serializable");
                        continue;
                    }
                };
                if socket.send(Message::Text(text)).await.is_err() {
                    break;
                }
            }
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
