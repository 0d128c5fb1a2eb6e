//! HTTP and server-sent-events front end for dialogue sessions.
//!
//! Session work runs on the blocking pool; progress reaches clients through
//! `GET /sessions/{id}/events`, which replays the persisted event log after
//! `Last-Event-ID` and then follows live events.

use std::collections::HashMap;
use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use scenario_loop::llm::{open_backend, Backend, Completion, CompletionRequest, LlmError};
use scenario_loop::prompt::TrainingExample;
use scenario_loop::session::{
    self, begin_comment, create_session, repair_loop, Context, DialogueSession, EventRecord, EventSink, SessionConfig,
    SessionError, SessionState, SessionStore,
};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use tower_http::services::ServeDir;

/// Builds a fresh backend for each run of the repair loop.
pub type BackendFactory = Arc<dyn Fn() -> Result<Box<dyn Backend>, LlmError> + Send + Sync>;

const EVENT_BUFFER: usize = 1024;

pub struct AppState {
    pub store: SessionStore,
    pub config: SessionConfig,
    pub training: Vec<TrainingExample>,
    backends: BackendFactory,
    running: Mutex<HashMap<String, Arc<AtomicBool>>>,
    events: broadcast::Sender<EventRecord>,
}

struct Broadcast(broadcast::Sender<EventRecord>);

impl EventSink for Broadcast {
    fn publish(&self, record: &EventRecord) {
        // no subscribers is fine
        let _ = self.0.send(record.clone());
    }
}

/// Stands in for a backend that could not be built, so the failure lands in
/// the session like any other transport error.
struct Unavailable(LlmError);

impl Backend for Unavailable {
    fn name(&self) -> &'static str {
        "unavailable"
    }

    fn complete(&mut self, _request: &CompletionRequest) -> Result<Completion, LlmError> {
        Err(self.0.clone())
    }
}

impl AppState {
    pub fn new(
        store: SessionStore,
        config: SessionConfig,
        training: Vec<TrainingExample>,
        backends: BackendFactory,
    ) -> Arc<Self> {
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        Arc::new(Self { store, config, training, backends, running: Mutex::new(HashMap::new()), events })
    }

    /// Uses `config.backend` for every session.
    pub fn from_config(config: SessionConfig, training: Vec<TrainingExample>) -> Result<Arc<Self>, LlmError> {
        let spec = config.backend.clone();
        let llm = config.llm.clone();
        open_backend(&spec, &llm)?;
        let store = SessionStore::new(&config.sessions_dir);
        Ok(Self::new(store, config, training, Arc::new(move || open_backend(&spec, &llm))))
    }

    pub fn is_running(&self, id: &str) -> bool {
        self.running.lock().expect("running set").contains_key(id)
    }

    fn claim(&self, id: &str) -> Result<Arc<AtomicBool>, ApiError> {
        let mut running = self.running.lock().expect("running set");
        if running.contains_key(id) {
            return Err(ApiError::Busy(id.to_string()));
        }
        let flag = Arc::new(AtomicBool::new(false));
        running.insert(id.to_string(), flag.clone());
        Ok(flag)
    }

    fn release(&self, id: &str) {
        self.running.lock().expect("running set").remove(id);
    }

    /// Restarts every session that was left generating, e.g. after a crash.
    pub fn resume_interrupted(self: &Arc<Self>) -> Result<Vec<String>, SessionError> {
        let mut resumed = Vec::new();
        for id in self.store.list()? {
            let session = self.store.load(&id)?;
            if session.state == SessionState::Generating {
                if let Ok(cancel) = self.claim(&id) {
                    spawn_loop(self.clone(), session, cancel);
                    resumed.push(id);
                }
            }
        }
        Ok(resumed)
    }
}

fn spawn_loop(state: Arc<AppState>, mut session: DialogueSession, cancel: Arc<AtomicBool>) {
    tokio::task::spawn_blocking(move || {
        let sink = Broadcast(state.events.clone());
        let ctx = Context { store: &state.store, sink: &sink, cancel: Some(&cancel) };
        let mut backend = (state.backends)().unwrap_or_else(|e| Box::new(Unavailable(e)));
        backend.resume_after(session.total_queries() as usize);
        if let Err(e) = repair_loop(&ctx, &mut session, backend.as_mut()) {
            tracing::error!(session = %session.id, error = %e, "repair loop failed");
        }
        state.release(&session.id);
    });
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("session {0} is generating")]
    Busy(String),
    #[error("session {0} is not generating")]
    Idle(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::Session(e) => match e {
                SessionError::NotFound(_) => StatusCode::NOT_FOUND,
                SessionError::InvalidState { .. } | SessionError::TurnsExhausted(_) | SessionError::Exists(_) => {
                    StatusCode::CONFLICT
                }
                SessionError::EmptyDescription | SessionError::EmptyComment | SessionError::Map(_) => {
                    StatusCode::BAD_REQUEST
                }
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ApiError::Busy(_) | ApiError::Idle(_) => StatusCode::CONFLICT,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

pub fn router(state: Arc<AppState>, ui: Option<PathBuf>) -> Router {
    let app = Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/comment", post(comment))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/cancel", post(cancel))
        .route("/sessions/{id}/resume", post(resume))
        .route("/sessions/{id}/prompt", get(prompt))
        .route("/sessions/{id}/events", get(events))
        .route("/sessions/{id}/turns/{k}/code", get(code))
        .route("/sessions/{id}/turns/{k}/diagnostics", get(diagnostics))
        .route("/sessions/{id}/turns/{k}/scenes/{j}/scene", get(scene))
        .route("/sessions/{id}/turns/{k}/scenes/{j}/trace", get(trace))
        .with_state(state);
    match ui {
        Some(dir) => app.nest_service("/ui", ServeDir::new(dir)),
        None => app,
    }
}

/// Session ids become directory names, so only plain ids are accepted.
fn checked(state: &AppState, id: &str) -> Result<(), ApiError> {
    let plain = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if plain && state.store.exists(id) {
        Ok(())
    } else {
        Err(ApiError::NotFound(format!("session {id}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateRequest {
    pub description: String,
    #[serde(default)]
    pub map: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub state: SessionState,
}

async fn create(State(state): State<Arc<AppState>>, Json(req): Json<CreateRequest>) -> Result<Response, ApiError> {
    let mut config = state.config.clone();
    if let Some(map) = req.map {
        config.map = map;
    }
    let sink = Broadcast(state.events.clone());
    let ctx = Context { store: &state.store, sink: &sink, cancel: None };
    let session = create_session(&ctx, None, &req.description, &config, &state.training)?;
    let cancel = state.claim(&session.id)?;
    let body = Created { id: session.id.clone(), state: session.state };
    spawn_loop(state.clone(), session, cancel);
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Listed {
    pub id: String,
    pub state: SessionState,
    pub description: String,
    pub turns: u32,
}

async fn list(State(state): State<Arc<AppState>>) -> Result<Json<Vec<Listed>>, ApiError> {
    let mut out = Vec::new();
    for id in state.store.list()? {
        let s = state.store.load(&id)?;
        out.push(Listed { id: s.id.clone(), state: s.state, description: s.description.clone(), turns: s.turn() });
    }
    Ok(Json(out))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: DialogueSession,
    pub busy: bool,
}

async fn show(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    checked(&state, &id)?;
    let session = state.store.load(&id)?;
    Ok(Json(SessionView { busy: state.is_running(&id), session }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CommentRequest {
    pub text: String,
}

async fn comment(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<CommentRequest>,
) -> Result<Response, ApiError> {
    checked(&state, &id)?;
    let cancel = state.claim(&id)?;
    let started = (|| {
        let mut session = state.store.load(&id)?;
        let sink = Broadcast(state.events.clone());
        let ctx = Context { store: &state.store, sink: &sink, cancel: None };
        begin_comment(&ctx, &mut session, &req.text)?;
        Ok::<_, SessionError>(session)
    })();
    match started {
        Ok(session) => {
            let body = Created { id: id.clone(), state: session.state };
            spawn_loop(state.clone(), session, cancel);
            Ok((StatusCode::ACCEPTED, Json(body)).into_response())
        }
        Err(e) => {
            state.release(&id);
            Err(e.into())
        }
    }
}

async fn accept(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<session::SessionSummary>, ApiError> {
    checked(&state, &id)?;
    state.claim(&id)?;
    let result = (|| {
        let mut session = state.store.load(&id)?;
        let sink = Broadcast(state.events.clone());
        let ctx = Context { store: &state.store, sink: &sink, cancel: None };
        session::accept(&ctx, &mut session)
    })();
    state.release(&id);
    Ok(Json(result?))
}

async fn cancel(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    checked(&state, &id)?;
    let running = state.running.lock().expect("running set");
    let flag = running.get(&id).ok_or_else(|| ApiError::Idle(id.clone()))?;
    flag.store(true, Ordering::SeqCst);
    Ok(StatusCode::ACCEPTED)
}

async fn resume(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    checked(&state, &id)?;
    let cancel = state.claim(&id)?;
    let session = match state.store.load(&id) {
        Ok(s) if s.state == SessionState::Generating => s,
        Ok(s) => {
            state.release(&id);
            return Err(SessionError::InvalidState { op: "resume", state: s.state }.into());
        }
        Err(e) => {
            state.release(&id);
            return Err(e.into());
        }
    };
    spawn_loop(state.clone(), session, cancel);
    Ok((StatusCode::ACCEPTED, Json(Created { id, state: SessionState::Generating })).into_response())
}

async fn prompt(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Vec<session::PromptLogEntry>>, ApiError> {
    checked(&state, &id)?;
    Ok(Json(state.store.prompt_log(&id)?))
}

fn event_frame(record: &EventRecord) -> Event {
    Event::default()
        .id(record.id.to_string())
        .event(record.event.name())
        .data(serde_json::to_string(record).expect("event serializes"))
}

async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    checked(&state, &id)?;
    let after = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(0);
    // subscribe before reading the log so nothing falls between the two
    let rx = state.events.subscribe();
    let backlog = state.store.events(&id, after)?;
    let last = backlog.last().map_or(after, |r| r.id);
    let live = stream::unfold((rx, last, state, id), |(mut rx, mut last, state, id)| async move {
        loop {
            match rx.recv().await {
                Ok(r) if r.session == id && r.id > last => {
                    last = r.id;
                    return Some((vec![r], (rx, last, state, id)));
                }
                Ok(_) => {}
                Err(broadcast::error::RecvError::Lagged(_)) => {
                    let missed = state.store.events(&id, last).unwrap_or_default();
                    if let Some(r) = missed.last() {
                        last = r.id;
                        return Some((missed, (rx, last, state, id)));
                    }
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    })
    .flat_map(stream::iter);
    let frames = stream::iter(backlog).chain(live).map(|r| Ok(event_frame(&r)));
    Ok(Sse::new(frames).keep_alive(KeepAlive::default()))
}

fn artifact(state: &AppState, id: &str, rel: PathBuf, content_type: &'static str) -> Result<Response, ApiError> {
    checked(state, id)?;
    let path = state.store.dir(id).join(&rel);
    match std::fs::read(&path) {
        Ok(body) => Ok(([(header::CONTENT_TYPE, content_type)], body).into_response()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ApiError::NotFound(rel.display().to_string())),
        Err(e) => Err(SessionError::Io(e).into()),
    }
}

async fn code(State(state): State<Arc<AppState>>, Path((id, k)): Path<(String, u32)>) -> Result<Response, ApiError> {
    artifact(&state, &id, PathBuf::from(format!("turns/{k}/code.scenic")), "text/plain; charset=utf-8")
}

async fn diagnostics(
    State(state): State<Arc<AppState>>,
    Path((id, k)): Path<(String, u32)>,
) -> Result<Response, ApiError> {
    artifact(&state, &id, PathBuf::from(format!("turns/{k}/diagnostics.txt")), "text/plain; charset=utf-8")
}

async fn scene(
    State(state): State<Arc<AppState>>,
    Path((id, k, j)): Path<(String, u32, u32)>,
) -> Result<Response, ApiError> {
    artifact(&state, &id, PathBuf::from(format!("turns/{k}/scenes/{j}.scene")), "application/json")
}

async fn trace(
    State(state): State<Arc<AppState>>,
    Path((id, k, j)): Path<(String, u32, u32)>,
) -> Result<Response, ApiError> {
    artifact(&state, &id, PathBuf::from(format!("turns/{k}/scenes/{j}.trace")), "application/x-ndjson")
}

/// Serves until the listener fails or the process is stopped.
pub async fn serve(state: Arc<AppState>, ui: Option<PathBuf>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state, ui)).await
}
