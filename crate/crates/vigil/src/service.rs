//! Live sessions over HTTP and WebSocket.
//!
//! Each started session gets a tick task that owns its [`Episode`]. Handlers
//! never touch the episode: injections and clears travel over a command
//! queue that the task drains between ticks, and every frame the task emits
//! is appended to the session's history. Subscribers replay the history and
//! then follow it, so each one sees every frame exactly once and in order no
//! matter when it connects.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::time::MissedTickBehavior;

use vigil_core::runner::{
    Episode, EpisodeConfig, EpisodeLog, Harness, Outcome, RunnerError, Scene, StartSpec,
    TickRecord,
};
use vigil_core::simenv::{AnomalyKind, AnomalySpec};
use vigil_core::SCHEMA;

use crate::config::FrameworkConfig;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, m)
    }

    fn unprocessable(m: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, m)
    }

    fn conflict(m: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, m)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session `{id}`"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "schema": SCHEMA, "error": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body; an empty body reads as `{}`.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let raw: &[u8] = if body.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        body
    };
    let mut de = serde_json::Deserializer::from_slice(raw);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            ApiError::bad_request(format!("malformed request: {}", e.inner()))
        } else {
            ApiError::bad_request(format!("malformed request at `{path}`: {}", e.inner()))
        }
    })
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Episode defaults applied to `POST /sessions/{id}/start`.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDefaults {
    pub h_max: u64,
    pub seed: u64,
    pub start: StartSpec,
    pub tick_rate_hz: f64,
    pub max_sessions: usize,
}

impl SessionDefaults {
    pub fn from_config(cfg: &FrameworkConfig) -> Self {
        SessionDefaults {
            h_max: cfg.suite.h_max,
            seed: cfg.suite.seed,
            start: cfg.suite.nominal_start(),
            tick_rate_hz: cfg.service.tick_rate_hz,
            max_sessions: cfg.service.max_sessions,
        }
    }
}

/// Episode config overrides accepted when starting a session.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    pub label: Option<String>,
    pub h_max: Option<u64>,
    pub seed: Option<u64>,
    pub start: Option<StartSpec>,
    pub anomaly_schedule: Option<Vec<AnomalySpec>>,
    pub monitoring_enabled: Option<bool>,
    pub tick_rate_hz: Option<f64>,
}

/// An anomaly spec whose `start_tick` may be left out to mean "the next
/// tick".
#[derive(Debug, Clone, Deserialize)]
pub struct InjectRequest {
    #[serde(flatten)]
    pub kind: AnomalyKind,
    #[serde(default)]
    pub start_tick: Option<u64>,
    #[serde(default)]
    pub duration_ticks: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
struct Injected {
    applied_at_tick: u64,
    spec: AnomalySpec,
}

#[derive(Debug, Clone, Serialize)]
struct Cleared {
    kind: String,
    removed: usize,
    applied_at_tick: u64,
}

enum Command {
    Inject(InjectRequest, oneshot::Sender<ApiResult<Injected>>),
    Clear(String, oneshot::Sender<ApiResult<Cleared>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Phase {
    Configured,
    Running,
    Finished,
}

struct Status {
    phase: Phase,
    tick: u64,
    config: Option<EpisodeConfig>,
    tick_rate_hz: Option<f64>,
    log: Option<Arc<EpisodeLog>>,
}

#[derive(Clone)]
struct Frame {
    text: Arc<str>,
    end: bool,
}

struct Session {
    id: u64,
    status: Mutex<Status>,
    commands: Mutex<Option<mpsc::Sender<Command>>>,
    frames: Mutex<Vec<Frame>>,
    published: watch::Sender<usize>,
}

impl Session {
    fn new(id: u64) -> Self {
        Session {
            id,
            status: Mutex::new(Status {
                phase: Phase::Configured,
                tick: 0,
                config: None,
                tick_rate_hz: None,
                log: None,
            }),
            commands: Mutex::new(None),
            frames: Mutex::new(Vec::new()),
            published: watch::Sender::new(0),
        }
    }

    fn publish(&self, value: Value, end: bool) {
        let n = {
            let mut frames = self.frames.lock().unwrap();
            frames.push(Frame {
                text: value.to_string().into(),
                end,
            });
            frames.len()
        };
        self.published.send_replace(n);
    }

    fn summary(&self) -> Value {
        let s = self.status.lock().unwrap();
        json!({
            "schema": SCHEMA,
            "id": self.id.to_string(),
            "state": s.phase,
            "tick": s.tick,
            "tick_rate_hz": s.tick_rate_hz,
            "config": s.config,
            "outcome": s.log.as_ref().map(|l| l.outcome),
        })
    }
}

struct Inner {
    harness: Harness,
    defaults: SessionDefaults,
    sessions: Mutex<BTreeMap<u64, Arc<Session>>>,
    next_id: Mutex<u64>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(harness: Harness, defaults: SessionDefaults) -> Self {
        AppState(Arc::new(Inner {
            harness,
            defaults,
            sessions: Mutex::new(BTreeMap::new()),
            next_id: Mutex::new(1),
        }))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        id.parse::<u64>()
            .ok()
            .and_then(|n| self.0.sessions.lock().unwrap().get(&n).cloned())
            .ok_or_else(|| ApiError::not_found(id))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/start", post(start_session))
        .route("/sessions/{id}/anomaly", post(inject))
        .route("/sessions/{id}/anomaly/{kind}", delete(clear))
        .route("/sessions/{id}/log", get(get_log))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

/// Binds the listening socket; a taken port surfaces here, before serving.
pub async fn bind(host: &str, port: u16) -> std::io::Result<TcpListener> {
    TcpListener::bind((host, port)).await
}

/// Serves until Ctrl-C.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn healthz() -> Json<Value> {
    Json(json!({ "schema": SCHEMA, "status": "ok" }))
}

async fn create_session(State(app): State<AppState>) -> ApiResult<(StatusCode, Json<Value>)> {
    let mut sessions = app.0.sessions.lock().unwrap();
    if sessions.len() >= app.0.defaults.max_sessions {
        // Make room by forgetting the oldest finished session.
        let oldest = sessions
            .iter()
            .find(|(_, s)| s.status.lock().unwrap().phase == Phase::Finished)
            .map(|(&id, _)| id);
        match oldest {
            Some(id) => {
                sessions.remove(&id);
            }
            None => {
                return Err(ApiError::new(
                    StatusCode::SERVICE_UNAVAILABLE,
                    "session limit reached",
                ))
            }
        }
    }
    let id = {
        let mut next = app.0.next_id.lock().unwrap();
        let id = *next;
        *next += 1;
        id
    };
    sessions.insert(id, Arc::new(Session::new(id)));
    Ok((
        StatusCode::CREATED,
        Json(json!({ "schema": SCHEMA, "id": id.to_string() })),
    ))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    Ok(Json(app.session(&id)?.summary()))
}

async fn start_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id)?;
    let req: StartRequest = parse_body(&body)?;
    let d = &app.0.defaults;
    let rate = req.tick_rate_hz.unwrap_or(d.tick_rate_hz);
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(ApiError::unprocessable("tick_rate_hz must be positive"));
    }
    let cfg = EpisodeConfig {
        index: 0,
        label: req.label.unwrap_or_else(|| "live".into()),
        h_max: req.h_max.unwrap_or(d.h_max),
        seed: req.seed.unwrap_or(d.seed),
        start: req.start.unwrap_or_else(|| d.start.clone()),
        anomaly_schedule: req.anomaly_schedule.unwrap_or_default(),
        monitoring_enabled: req
            .monitoring_enabled
            .unwrap_or(app.0.harness.monitor.is_some()),
    };

    let mut status = session.status.lock().unwrap();
    if status.phase != Phase::Configured {
        return Err(ApiError::conflict(format!(
            "session {id} has already been started"
        )));
    }
    let episode =
        Episode::new(&app.0.harness, cfg.clone()).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let start = episode.env().ee_pos();
    let (tx, rx) = mpsc::channel(64);
    *session.commands.lock().unwrap() = Some(tx);
    status.phase = Phase::Running;
    status.config = Some(cfg.clone());
    status.tick_rate_hz = Some(rate);
    drop(status);

    let period = Duration::from_secs_f64(1.0 / rate);
    tokio::spawn(run_session(session.clone(), episode, rx, period));
    Ok(Json(json!({
        "schema": SCHEMA,
        "id": id,
        "state": Phase::Running,
        "config": cfg,
        "start": start,
        "tick_rate_hz": rate,
    })))
}

fn sender(session: &Session) -> ApiResult<mpsc::Sender<Command>> {
    let phase = session.status.lock().unwrap().phase;
    match (phase, session.commands.lock().unwrap().clone()) {
        (Phase::Running, Some(tx)) => Ok(tx),
        (Phase::Configured, _) => Err(ApiError::conflict("session has not been started")),
        _ => Err(ApiError::conflict("episode has finished")),
    }
}

async fn send_command<T>(
    session: &Session,
    make: impl FnOnce(oneshot::Sender<ApiResult<T>>) -> Command,
) -> ApiResult<T> {
    let tx = sender(session)?;
    let (reply, wait) = oneshot::channel();
    let finished = || ApiError::conflict("episode has finished");
    tx.send(make(reply)).await.map_err(|_| finished())?;
    wait.await.map_err(|_| finished())?
}

async fn inject(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id)?;
    let req: InjectRequest = parse_body(&body)?;
    let done = send_command(&session, |r| Command::Inject(req, r)).await?;
    Ok(Json(json!({
        "schema": SCHEMA,
        "applied_at_tick": done.applied_at_tick,
        "spec": done.spec,
    })))
}

async fn clear(
    State(app): State<AppState>,
    Path((id, kind)): Path<(String, String)>,
) -> ApiResult<Json<Value>> {
    let session = app.session(&id)?;
    if !AnomalyKind::NAMES.contains(&kind.as_str()) {
        return Err(ApiError::unprocessable(format!(
            "unknown anomaly kind `{kind}` (expected one of {})",
            AnomalyKind::NAMES.join(", ")
        )));
    }
    let done = send_command(&session, |r| Command::Clear(kind, r)).await?;
    Ok(Json(json!({
        "schema": SCHEMA,
        "kind": done.kind,
        "removed": done.removed,
        "applied_at_tick": done.applied_at_tick,
    })))
}

async fn get_log(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<EpisodeLog>> {
    let session = app.session(&id)?;
    let log = session.status.lock().unwrap().log.clone();
    match log {
        Some(log) => Ok(Json((*log).clone())),
        None => Err(ApiError::conflict("episode has not finished")),
    }
}

fn apply(ep: &mut Episode, cmd: Command) {
    let now = ep.env().tick();
    match cmd {
        Command::Inject(req, reply) => {
            let start = req.start_tick.unwrap_or(now);
            let result = if start < now {
                Err(ApiError::unprocessable(format!(
                    "start_tick {start} has passed; the next tick is {now}"
                )))
            } else {
                let spec = AnomalySpec::new(req.kind, start, req.duration_ticks);
                match ep.inject(spec.clone()) {
                    Ok(()) => Ok(Injected {
                        applied_at_tick: start,
                        spec,
                    }),
                    Err(RunnerError::Finished) => Err(ApiError::conflict("episode has finished")),
                    Err(e) => Err(ApiError::unprocessable(e.to_string())),
                }
            };
            let _ = reply.send(result);
        }
        Command::Clear(kind, reply) => {
            let removed = ep.clear(&kind);
            let _ = reply.send(Ok(Cleared {
                kind,
                removed,
                applied_at_tick: now,
            }));
        }
    }
}

fn tick_frame(session: u64, record: &TickRecord, scene: &Scene) -> Value {
    json!({
        "schema": SCHEMA,
        "type": "tick",
        "session": session.to_string(),
        "record": record,
        "scene": scene,
        "wall_time_ms": now_ms(),
    })
}

/// The tick task: sole owner of the episode.
async fn run_session(
    session: Arc<Session>,
    mut ep: Episode,
    mut commands: mpsc::Receiver<Command>,
    period: Duration,
) {
    let mut clock = tokio::time::interval(period);
    clock.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut failure = None;
    while !ep.is_finished() {
        clock.tick().await;
        while let Ok(cmd) = commands.try_recv() {
            apply(&mut ep, cmd);
        }
        // The scene as the frame was rendered, before the action moves it.
        let scene = ep.scene();
        match ep.step() {
            Ok(Some(record)) => {
                let frame = tick_frame(session.id, record, &scene);
                session.publish(frame, false);
                session.status.lock().unwrap().tick = ep.env().tick();
            }
            Ok(None) => break,
            Err(e) => {
                failure = Some(e.to_string());
                break;
            }
        }
    }

    // Late commands see a closed queue.
    commands.close();
    *session.commands.lock().unwrap() = None;
    while let Ok(cmd) = commands.try_recv() {
        let finished = || ApiError::conflict("episode has finished");
        match cmd {
            Command::Inject(_, r) => drop(r.send(Err(finished()))),
            Command::Clear(_, r) => drop(r.send(Err(finished()))),
        }
    }

    let mut log = ep.into_log();
    if let Some(e) = failure {
        log.outcome = Outcome::Error;
        log.error = Some(e);
    }
    session.publish(
        json!({
            "schema": SCHEMA,
            "type": "end",
            "session": session.id.to_string(),
            "outcome": log.outcome,
            "total_ticks": log.total_ticks,
            "stage_report": log.stage_report,
            "error": log.error,
            "wall_time_ms": now_ms(),
        }),
        true,
    );
    let mut status = session.status.lock().unwrap();
    status.phase = Phase::Finished;
    status.tick = log.total_ticks;
    status.log = Some(Arc::new(log));
}

async fn stream(
    State(app): State<AppState>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let session = app.session(&id)?;
    Ok(ws.on_upgrade(move |socket| follow(socket, session)))
}

/// Sends the session's frames from the first one on, then closes after the
/// end frame. Anything the client sends gets an error frame back.
async fn follow(mut socket: WebSocket, session: Arc<Session>) {
    let mut published = session.published.subscribe();
    let mut next = 0;
    loop {
        let available = *published.borrow_and_update();
        if next < available {
            let batch: Vec<Frame> = session.frames.lock().unwrap()[next..available].to_vec();
            next = available;
            for f in batch {
                if socket.send(Message::Text(f.text.to_string().into())).await.is_err() {
                    return;
                }
                if f.end {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            }
            continue;
        }
        tokio::select! {
            changed = published.changed() => {
                if changed.is_err() {
                    return;
                }
            }
            msg = socket.recv() => match msg {
                None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return,
                Some(Ok(Message::Text(_) | Message::Binary(_))) => {
                    let reply = json!({
                        "schema": SCHEMA,
                        "type": "error",
                        "message": "the stream is read-only; control the session over HTTP",
                    });
                    if socket.send(Message::Text(reply.to_string().into())).await.is_err() {
                        return;
                    }
                }
                Some(Ok(_)) => {}
            }
        }
    }
}
