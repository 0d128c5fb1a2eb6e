//! Dialogue sessions: the per-turn repair loop, user turns, persistence and
//! progress events.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsl::{self, diagnostic::render_all, Code, Diagnostic, ScenarioProgram, SymbolTable};
use crate::llm::{complete_logged, extract_code, AuditLog, Backend, LlmConfig};
use crate::prompt::{build_initial_prompt, count_tokens, FeedbackKind, Message, PromptError, PromptState, TrainingExample};
use crate::road::{load_network, MapError, RoadNetwork};
use crate::sample::{sample_scene, Scene};
use crate::sim::{run_scene, SimConfig, Trace};

pub const DEFAULT_MAP: &str = "town_cross4";
pub const CONFIG_FILE: &str = "scenario-loop.toml";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Parse { path: String, source: toml::de::Error },
    #[error("{path}: credentials are read from LLM_API_KEY only, remove '{key}'")]
    Credential { path: String, key: String },
    #[error("environment variable {name}: cannot parse '{value}'")]
    Env { name: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub map: String,
    pub budget: usize,
    pub max_turns: u32,
    pub max_queries: u32,
    /// Scenes sampled and simulated per executable turn.
    pub seeds: u32,
    pub seed_base: u64,
    /// Seeds the example shuffle.
    pub prompt_seed: u64,
    pub counter: String,
    /// Token cap on diagnostics fed back to the model.
    pub feedback_limit: usize,
    pub backend: String,
    pub corpus: PathBuf,
    pub sessions_dir: PathBuf,
    pub llm: LlmConfig,
    pub sim: SimConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            map: DEFAULT_MAP.into(),
            budget: crate::prompt::DEFAULT_BUDGET,
            max_turns: 5,
            max_queries: 5,
            seeds: 3,
            seed_base: 0,
            prompt_seed: 0,
            counter: crate::prompt::DEFAULT_COUNTER.into(),
            feedback_limit: 1000,
            backend: "http".into(),
            corpus: PathBuf::from("corpus"),
            sessions_dir: PathBuf::from("sessions"),
            llm: LlmConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

fn find_credential_key(value: &toml::Value, prefix: &str) -> Option<String> {
    let toml::Value::Table(t) = value else { return None };
    for (k, v) in t {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let lower = k.to_ascii_lowercase();
        let secret = lower.contains("api_key")
            || lower == "key"
            || lower.contains("secret")
            || (lower.contains("token") && !lower.ends_with("tokens"));
        if secret {
            return Some(path);
        }
        if let Some(found) = find_credential_key(v, &path) {
            return Some(found);
        }
    }
    None
}

impl SessionConfig {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let raw: toml::Value =
            toml::from_str(text).map_err(|source| ConfigError::Parse { path: origin.into(), source })?;
        if let Some(key) = find_credential_key(&raw, "") {
            return Err(ConfigError::Credential { path: origin.into(), key });
        }
        toml::from_str(text).map_err(|source| ConfigError::Parse { path: origin.into(), source })
    }

    /// Reads `path` when it exists, defaults otherwise.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&text, &path.display().to_string())
    }

    /// `SCENARIO_LOOP_*` variables plus `LLM_ENDPOINT` and `LLM_MODEL`.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        self.apply_vars(|name| std::env::var(name).ok())
    }

    pub fn apply_vars(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &str, value: String) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::Env { name: name.into(), value })
        }
        if let Some(v) = lookup("SCENARIO_LOOP_MAP") {
            self.map = v;
        }
        if let Some(v) = lookup("SCENARIO_LOOP_BACKEND") {
            self.backend = v;
        }
        if let Some(v) = lookup("SCENARIO_LOOP_CORPUS") {
            self.corpus = v.into();
        }
        if let Some(v) = lookup("SCENARIO_LOOP_SESSIONS_DIR") {
            self.sessions_dir = v.into();
        }
        if let Some(v) = lookup("SCENARIO_LOOP_BUDGET") {
            self.budget = parse("SCENARIO_LOOP_BUDGET", v)?;
        }
        if let Some(v) = lookup("SCENARIO_LOOP_MAX_TURNS") {
            self.max_turns = parse("SCENARIO_LOOP_MAX_TURNS", v)?;
        }
        if let Some(v) = lookup("SCENARIO_LOOP_MAX_QUERIES") {
            self.max_queries = parse("SCENARIO_LOOP_MAX_QUERIES", v)?;
        }
        if let Some(v) = lookup("SCENARIO_LOOP_SEEDS") {
            self.seeds = parse("SCENARIO_LOOP_SEEDS", v)?;
        }
        if let Some(v) = lookup("LLM_ENDPOINT") {
            self.llm.endpoint = v;
        }
        if let Some(v) = lookup("LLM_MODEL") {
            self.llm.model = v;
        }
        Ok(())
    }

    pub fn scene_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|j| self.seed_base + j).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Generating,
    AwaitingUser,
    NeedsUserHelp,
    Succeeded,
    Failed,
}

impl SessionState {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionState::Succeeded | SessionState::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Generating => "generating",
            SessionState::AwaitingUser => "awaiting_user",
            SessionState::NeedsUserHelp => "needs_user_help",
            SessionState::Succeeded => "succeeded",
            SessionState::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query: u32,
    /// Postprocessed code, when a block could be extracted.
    pub code: Option<String>,
    pub diagnostics: Vec<Diagnostic>,
    /// Text sent back after the error prefix.
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnOutcome {
    pub turn: u32,
    /// The user comment that opened this turn; none for the first.
    pub comment: Option<String>,
    pub queries: Vec<QueryRecord>,
    pub executable: bool,
    pub final_code: Option<String>,
    pub seeds: Vec<u64>,
    /// Trace files relative to the session directory.
    pub traces: Vec<String>,
    /// Why the turn stopped early (transport failure, cancellation).
    pub halted: Option<String>,
}

impl TurnOutcome {
    fn new(turn: u32, comment: Option<String>) -> Self {
        Self {
            turn,
            comment,
            queries: Vec::new(),
            executable: false,
            final_code: None,
            seeds: Vec::new(),
            traces: Vec::new(),
            halted: None,
        }
    }

    pub fn queries_used(&self) -> u32 {
        self.queries.len() as u32
    }

    pub fn feedback(&self) -> Vec<&str> {
        self.queries.iter().filter_map(|q| q.feedback.as_deref()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueSession {
    pub id: String,
    pub description: String,
    pub state: SessionState,
    pub prompt: PromptState,
    pub turns: Vec<TurnOutcome>,
    pub config: SessionConfig,
}

impl DialogueSession {
    pub fn turn(&self) -> u32 {
        self.turns.len() as u32
    }

    pub fn queries_per_turn(&self) -> Vec<u32> {
        self.turns.iter().map(TurnOutcome::queries_used).collect()
    }

    pub fn total_queries(&self) -> u32 {
        self.queries_per_turn().iter().sum()
    }

    pub fn current(&self) -> Option<&TurnOutcome> {
        self.turns.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub description: String,
    pub map: String,
    pub success_turn: u32,
    pub queries_per_turn: Vec<u32>,
    pub total_queries: u32,
    pub final_code: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    QueryStarted { turn: u32, query: u32 },
    QueryFinished { turn: u32, query: u32, executable: bool },
    Diagnostics { turn: u32, query: u32, text: String },
    SceneReady { turn: u32, scene: u32, seed: u64, termination: String },
    StateChanged { state: SessionState },
}

impl SessionEvent {
    pub fn name(&self) -> &'static str {
        match self {
            SessionEvent::QueryStarted { .. } => "query_started",
            SessionEvent::QueryFinished { .. } => "query_finished",
            SessionEvent::Diagnostics { .. } => "diagnostics",
            SessionEvent::SceneReady { .. } => "scene_ready",
            SessionEvent::StateChanged { .. } => "state_changed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    /// 1-based, per session.
    pub id: u64,
    pub session: String,
    #[serde(flatten)]
    pub event: SessionEvent,
}

pub trait EventSink: Send + Sync {
    fn publish(&self, record: &EventRecord);
}

pub struct NullSink;

impl EventSink for NullSink {
    fn publish(&self, _record: &EventRecord) {}
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLogEntry {
    pub turn: u32,
    pub query: u32,
    #[serde(flatten)]
    pub message: Message,
}

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("cannot {op} a session in state {}", state.as_str())]
    InvalidState { op: &'static str, state: SessionState },
    #[error("all {0} turns are used")]
    TurnsExhausted(u32),
    #[error("the description is empty")]
    EmptyDescription,
    #[error("the comment is empty")]
    EmptyComment,
    #[error("session {0} already exists")]
    Exists(String),
    #[error("no session {0}")]
    NotFound(String),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("session store: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt session file {path}: {message}")]
    Corrupt { path: String, message: String },
}

/// One directory per session under a root.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, id: &str) -> PathBuf {
        self.root.join(id)
    }

    pub fn exists(&self, id: &str) -> bool {
        self.dir(id).join("session.json").exists()
    }

    pub fn audit_log(&self, id: &str) -> AuditLog {
        AuditLog::new(self.dir(id).join("llm.log"))
    }

    pub fn turn_dir(&self, id: &str, turn: u32) -> PathBuf {
        self.dir(id).join("turns").join(turn.to_string())
    }

    pub fn trace_path(&self, id: &str, turn: u32, scene: u32) -> PathBuf {
        self.turn_dir(id, turn).join("scenes").join(format!("{scene}.trace"))
    }

    pub fn save(&self, session: &DialogueSession) -> Result<(), SessionError> {
        let dir = self.dir(&session.id);
        fs::create_dir_all(&dir)?;
        let tmp = dir.join("session.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(session).expect("session serializes"))?;
        fs::rename(tmp, dir.join("session.json"))?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<DialogueSession, SessionError> {
        let path = self.dir(id).join("session.json");
        if !path.exists() {
            return Err(SessionError::NotFound(id.into()));
        }
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| SessionError::Corrupt { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn list(&self) -> Result<Vec<String>, SessionError> {
        let mut ids = Vec::new();
        if self.root.exists() {
            for entry in fs::read_dir(&self.root)? {
                let entry = entry?;
                if entry.path().join("session.json").exists() {
                    ids.push(entry.file_name().to_string_lossy().into_owned());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn append(&self, id: &str, file: &str, line: &str) -> Result<(), SessionError> {
        let dir = self.dir(id);
        fs::create_dir_all(&dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(file))?;
        writeln!(f, "{line}")?;
        Ok(())
    }

    fn append_prompt(&self, id: &str, turn: u32, query: u32, message: &Message) -> Result<(), SessionError> {
        let entry = PromptLogEntry { turn, query, message: message.clone() };
        self.append(id, "prompt.log", &serde_json::to_string(&entry).expect("prompt entry serializes"))
    }

    pub fn prompt_log(&self, id: &str) -> Result<Vec<PromptLogEntry>, SessionError> {
        read_jsonl(&self.dir(id).join("prompt.log"))
    }

    pub fn events(&self, id: &str, after: u64) -> Result<Vec<EventRecord>, SessionError> {
        let all: Vec<EventRecord> = read_jsonl(&self.dir(id).join("events.log"))?;
        Ok(all.into_iter().filter(|e| e.id > after).collect())
    }

    fn append_event(&self, id: &str, event: SessionEvent) -> Result<EventRecord, SessionError> {
        let path = self.dir(id).join("events.log");
        let next = if path.exists() { fs::read_to_string(&path)?.lines().count() as u64 + 1 } else { 1 };
        let record = EventRecord { id: next, session: id.into(), event };
        self.append(id, "events.log", &serde_json::to_string(&record).expect("event serializes"))?;
        Ok(record)
    }

    fn write_turn_file(&self, id: &str, turn: u32, rel: &str, contents: &str) -> Result<String, SessionError> {
        let path = self.turn_dir(id, turn).join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        Ok(format!("turns/{turn}/{rel}"))
    }

    fn append_turn_file(&self, id: &str, turn: u32, rel: &str, contents: &str) -> Result<(), SessionError> {
        let dir = self.turn_dir(id, turn);
        fs::create_dir_all(&dir)?;
        let mut f = OpenOptions::new().create(true).append(true).open(dir.join(rel))?;
        writeln!(f, "{contents}")?;
        Ok(())
    }

    pub fn summary(&self, id: &str) -> Result<Option<SessionSummary>, SessionError> {
        let path = self.dir(id).join("summary.json");
        if !path.exists() {
            return Ok(None);
        }
        serde_json::from_str(&fs::read_to_string(&path)?)
            .map(Some)
            .map_err(|e| SessionError::Corrupt { path: path.display().to_string(), message: e.to_string() })
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, SessionError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| SessionError::Corrupt { path: path.display().to_string(), message: e.to_string() })
        })
        .collect()
}

/// Longest prefix of `text` (on a char boundary) within `limit` tokens.
pub fn truncate_to_tokens(text: &str, limit: usize, counter: &str) -> Result<String, PromptError> {
    if count_tokens(text, counter)? <= limit {
        return Ok(text.to_string());
    }
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
    let (mut lo, mut hi) = (0, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if count_tokens(&text[..bounds[mid]], counter)? <= limit {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(text[..bounds[lo]].to_string())
}

pub struct ExecutableRun {
    pub code: String,
    pub program: ScenarioProgram,
    pub scenes: Vec<(Scene, Trace)>,
}

/// Compiles `code`, samples one scene per seed and simulates each.
pub fn execute_code(
    code: &str,
    network: &RoadNetwork,
    seeds: &[u64],
    sim: &SimConfig,
) -> Result<ExecutableRun, Vec<Diagnostic>> {
    let program = dsl::compile(code, &SymbolTable::standard())?;
    let mut scenes = Vec::new();
    for &seed in seeds {
        let scene = sample_scene(&program, network, seed).map_err(|e| vec![e.to_diagnostic()])?;
        let trace = run_scene(&program, &scene, network, sim).map_err(|d| vec![d])?;
        scenes.push((scene, trace));
    }
    Ok(ExecutableRun { code: code.to_string(), program, scenes })
}

/// Extracts, postprocesses and executes one model response.
fn evaluate_response(
    response: &str,
    description: &str,
    network: &RoadNetwork,
    seeds: &[u64],
    sim: &SimConfig,
) -> Result<ExecutableRun, (Option<String>, Vec<Diagnostic>)> {
    let raw = extract_code(response).map_err(|e| (None, vec![Diagnostic::error(Code::ExtractionError, e.to_string(), None)]))?;
    let code = dsl::postprocess_generated(&raw, description).map_err(|d| (None, vec![d]))?;
    execute_code(&code, network, seeds, sim).map_err(|d| (Some(code), d))
}

/// Shared services for session operations.
pub struct Context<'a> {
    pub store: &'a SessionStore,
    pub sink: &'a dyn EventSink,
    /// Checked between queries.
    pub cancel: Option<&'a AtomicBool>,
}

impl<'a> Context<'a> {
    pub fn new(store: &'a SessionStore) -> Self {
        Self { store, sink: &NullSink, cancel: None }
    }

    fn emit(&self, id: &str, event: SessionEvent) -> Result<(), SessionError> {
        let record = self.store.append_event(id, event)?;
        self.sink.publish(&record);
        Ok(())
    }

    fn set_state(&self, session: &mut DialogueSession, state: SessionState) -> Result<(), SessionError> {
        if session.state != state {
            session.state = state;
            self.emit(&session.id, SessionEvent::StateChanged { state })?;
        }
        Ok(())
    }

    fn cancelled(&self) -> bool {
        self.cancel.is_some_and(|c| c.swap(false, Ordering::SeqCst))
    }
}

pub fn new_session_id() -> String {
    uuid::Uuid::new_v4().simple().to_string()
}

/// Builds the initial prompt and persists a session ready for its first
/// repair loop. No query is issued.
pub fn create_session(
    ctx: &Context,
    id: Option<String>,
    description: &str,
    config: &SessionConfig,
    training: &[TrainingExample],
) -> Result<DialogueSession, SessionError> {
    let description = description.trim();
    if description.is_empty() {
        return Err(SessionError::EmptyDescription);
    }
    load_network(&config.map)?;
    let id = id.unwrap_or_else(new_session_id);
    if ctx.store.exists(&id) {
        return Err(SessionError::Exists(id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.prompt_seed);
    let prompt = build_initial_prompt(
        crate::prompt::SYSTEM_TEMPLATE,
        training,
        description,
        &mut rng,
        config.budget,
        &config.counter,
    )?;
    let session = DialogueSession {
        id,
        description: description.to_string(),
        state: SessionState::Generating,
        prompt,
        turns: vec![TurnOutcome::new(1, None)],
        config: config.clone(),
    };
    for m in session.prompt.messages() {
        ctx.store.append_prompt(&session.id, 1, 0, m)?;
    }
    ctx.store.save(&session)?;
    ctx.emit(&session.id, SessionEvent::StateChanged { state: SessionState::Generating })?;
    Ok(session)
}

/// Creates a session and runs its first turn.
pub fn start_session(
    ctx: &Context,
    description: &str,
    config: &SessionConfig,
    training: &[TrainingExample],
    backend: &mut dyn Backend,
) -> Result<DialogueSession, SessionError> {
    let mut session = create_session(ctx, None, description, config, training)?;
    repair_loop(ctx, &mut session, backend)?;
    Ok(session)
}

/// Continues a session that was interrupted while generating.
pub fn resume(ctx: &Context, id: &str, backend: &mut dyn Backend) -> Result<DialogueSession, SessionError> {
    let mut session = ctx.store.load(id)?;
    if session.state == SessionState::Generating {
        backend.resume_after(session.total_queries() as usize);
        repair_loop(ctx, &mut session, backend)?;
    }
    Ok(session)
}

fn append_message(
    ctx: &Context,
    session: &mut DialogueSession,
    kind: FeedbackKind,
    text: &str,
    query: u32,
) -> Result<(), PromptError> {
    session.prompt = session.prompt.append_feedback(kind, text)?;
    let message = session.prompt.tail.last().expect("appended message").clone();
    if let Err(e) = ctx.store.append_prompt(&session.id, session.turn(), query, &message) {
        tracing::warn!(session = %session.id, error = %e, "could not write prompt log");
    }
    Ok(())
}

/// Queries, checks and feeds back errors until the current turn yields an
/// executable scenario or runs out of queries.
pub fn repair_loop(ctx: &Context, session: &mut DialogueSession, backend: &mut dyn Backend) -> Result<(), SessionError> {
    if session.state != SessionState::Generating {
        return Err(SessionError::InvalidState { op: "generate in", state: session.state });
    }
    let network = load_network(&session.config.map)?;
    let seeds = session.config.scene_seeds();
    let turn = session.turn();
    let log = ctx.store.audit_log(&session.id);
    loop {
        let used = session.turns.last().expect("current turn").queries_used();
        if used >= session.config.max_queries {
            let state =
                if turn >= session.config.max_turns { SessionState::Failed } else { SessionState::NeedsUserHelp };
            ctx.set_state(session, state)?;
            ctx.store.save(session)?;
            return Ok(());
        }
        if ctx.cancelled() {
            session.turns.last_mut().expect("current turn").halted = Some("cancelled by user".into());
            ctx.set_state(session, SessionState::NeedsUserHelp)?;
            ctx.store.save(session)?;
            return Ok(());
        }
        let query = used + 1;
        ctx.emit(&session.id, SessionEvent::QueryStarted { turn, query })?;
        let request = session.config.llm.request(session.prompt.to_wire(session.config.llm.encoding));
        let response = match complete_logged(backend, &request, &log) {
            Ok(c) => c.text,
            Err(e) => {
                tracing::warn!(session = %session.id, error = %e, "completion failed");
                session.turns.last_mut().expect("current turn").halted = Some(e.to_string());
                ctx.set_state(session, SessionState::NeedsUserHelp)?;
                ctx.store.save(session)?;
                return Ok(());
            }
        };
        if let Err(e) = append_message(ctx, session, FeedbackKind::Assistant, &response, query) {
            session.turns.last_mut().expect("current turn").halted = Some(e.to_string());
            ctx.set_state(session, SessionState::NeedsUserHelp)?;
            ctx.store.save(session)?;
            return Ok(());
        }
        match evaluate_response(&response, &session.description, &network, &seeds, &session.config.sim) {
            Ok(run) => {
                let id = session.id.clone();
                ctx.store.write_turn_file(&id, turn, "code.scenic", &run.code)?;
                let mut traces = Vec::new();
                for (j, (scene, trace)) in run.scenes.iter().enumerate() {
                    ctx.store.write_turn_file(&id, turn, &format!("scenes/{j}.scene"), &scene.to_json())?;
                    traces.push(ctx.store.write_turn_file(&id, turn, &format!("scenes/{j}.trace"), &trace.to_jsonl())?);
                }
                let t = session.turns.last_mut().expect("current turn");
                t.queries.push(QueryRecord { query, code: Some(run.code.clone()), diagnostics: Vec::new(), feedback: None });
                t.executable = true;
                t.final_code = Some(run.code);
                t.seeds = seeds.clone();
                t.traces = traces;
                ctx.emit(&id, SessionEvent::QueryFinished { turn, query, executable: true })?;
                for (j, (scene, trace)) in run.scenes.iter().enumerate() {
                    ctx.emit(
                        &id,
                        SessionEvent::SceneReady {
                            turn,
                            scene: j as u32,
                            seed: scene.seed,
                            termination: trace.termination.label(),
                        },
                    )?;
                }
                ctx.set_state(session, SessionState::AwaitingUser)?;
                ctx.store.save(session)?;
                return Ok(());
            }
            Err((code, diagnostics)) => {
                let id = session.id.clone();
                if let Some(code) = &code {
                    ctx.store.write_turn_file(&id, turn, "code.scenic", code)?;
                }
                let text = truncate_to_tokens(&render_all(&diagnostics), session.config.feedback_limit, &session.config.counter)?;
                ctx.store.append_turn_file(&id, turn, "diagnostics.txt", &format!("query {query}\n{text}"))?;
                session.turns.last_mut().expect("current turn").queries.push(QueryRecord {
                    query,
                    code,
                    diagnostics,
                    feedback: Some(text.clone()),
                });
                ctx.emit(&id, SessionEvent::QueryFinished { turn, query, executable: false })?;
                ctx.emit(&id, SessionEvent::Diagnostics { turn, query, text: text.clone() })?;
                if let Err(e) = append_message(ctx, session, FeedbackKind::Error, &text, query) {
                    session.turns.last_mut().expect("current turn").halted = Some(e.to_string());
                    ctx.set_state(session, SessionState::NeedsUserHelp)?;
                    ctx.store.save(session)?;
                    return Ok(());
                }
                ctx.store.save(session)?;
            }
        }
    }
}

/// Appends a user comment and runs the next turn.
pub fn user_comment(
    ctx: &Context,
    session: &mut DialogueSession,
    text: &str,
    backend: &mut dyn Backend,
) -> Result<(), SessionError> {
    begin_comment(ctx, session, text)?;
    repair_loop(ctx, session, backend)
}

/// The state change of a comment without running the turn. Used by callers
/// that run the loop elsewhere.
pub fn begin_comment(ctx: &Context, session: &mut DialogueSession, text: &str) -> Result<(), SessionError> {
    if !matches!(session.state, SessionState::AwaitingUser | SessionState::NeedsUserHelp) {
        return Err(SessionError::InvalidState { op: "comment on", state: session.state });
    }
    let text = text.trim();
    if text.is_empty() {
        return Err(SessionError::EmptyComment);
    }
    if session.turn() >= session.config.max_turns {
        ctx.set_state(session, SessionState::Failed)?;
        ctx.store.save(session)?;
        return Err(SessionError::TurnsExhausted(session.config.max_turns));
    }
    let next = session.turn() + 1;
    let mut updated = session.clone();
    updated.turns.push(TurnOutcome::new(next, Some(text.to_string())));
    append_message(ctx, &mut updated, FeedbackKind::Comment, text, 0)?;
    *session = updated;
    ctx.set_state(session, SessionState::Generating)?;
    ctx.store.save(session)?;
    Ok(())
}

/// Marks the session successful and writes `summary.json`.
pub fn accept(ctx: &Context, session: &mut DialogueSession) -> Result<SessionSummary, SessionError> {
    if session.state != SessionState::AwaitingUser {
        return Err(SessionError::InvalidState { op: "accept", state: session.state });
    }
    let turn = session.current().expect("at least one turn");
    let summary = SessionSummary {
        id: session.id.clone(),
        description: session.description.clone(),
        map: session.config.map.clone(),
        success_turn: turn.turn,
        queries_per_turn: session.queries_per_turn(),
        total_queries: session.total_queries(),
        final_code: turn.final_code.clone().unwrap_or_default(),
        seeds: turn.seeds.clone(),
    };
    ctx.set_state(session, SessionState::Succeeded)?;
    ctx.store.save(session)?;
    fs::write(
        ctx.store.dir(&session.id).join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

/// Gives up on a session that is waiting for the user.
pub fn abandon(ctx: &Context, session: &mut DialogueSession) -> Result<(), SessionError> {
    if session.state.is_terminal() || session.state == SessionState::Generating {
        return Err(SessionError::InvalidState { op: "abandon", state: session.state });
    }
    ctx.set_state(session, SessionState::Failed)?;
    ctx.store.save(session)
}
