//! Chat-completion backends, the audit log and code extraction.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompt::{ExampleEncoding, WireMessage};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_MAX_TOKENS: u32 = 1400;
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4";
pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub messages: Vec<WireMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    /// Hex SHA-256 of (model, temperature, messages).
    pub fn hash(&self) -> String {
        let key = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": self.messages,
        });
        hex::encode(Sha256::digest(key.to_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidRequest(format!("temperature {} is negative", self.temperature)));
        }
        match self.messages.first() {
            None => Err(LlmError::InvalidRequest("no messages".into())),
            Some(m) if m.role != "system" || m.name.is_some() => {
                Err(LlmError::InvalidRequest("first message is not the system message".into()))
            }
            Some(_) => Ok(()),
        }
    }

    pub fn last_user_message(&self) -> Option<&str> {
        self.messages.iter().rev().find(|m| m.role == "user" && m.name.is_none()).map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    pub attempts: u32,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum LlmError {
    #[error("transport error: {message}")]
    Transport { message: String, status: Option<u16>, retryable: bool },
    #[error("script exhausted after {used} responses")]
    ScriptExhausted { used: usize },
    #[error("scripted response {index} expects the last user message to contain '{expected}'")]
    ScriptMismatch { index: usize, expected: String },
    #[error("no recorded response for request {0}")]
    ReplayMiss(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

pub trait Backend: Send {
    fn name(&self) -> &'static str;
    fn complete(&mut self, request: &CompletionRequest) -> Result<Completion, LlmError>;

    /// Positions the backend as if `calls` completions had already been
    /// served. Only meaningful for order-based backends.
    fn resume_after(&mut self, _calls: usize) {}
}

/// Builds a backend from a spec: `http`, `scripted:<file>`, `replay:<file>`
/// (offline) or `record:<file>` (replay, forwarding misses over HTTP).
pub fn open_backend(spec: &str, config: &LlmConfig) -> Result<Box<dyn Backend>, LlmError> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    let need_path = || {
        if arg.is_empty() {
            Err(LlmError::Config(format!("backend '{kind}' needs a file, as in {kind}:<path>")))
        } else {
            Ok(Path::new(arg))
        }
    };
    match kind {
        "http" => Ok(Box::new(HttpBackend::from_env(config)?)),
        "scripted" => Ok(Box::new(ScriptedBackend::load(need_path()?)?)),
        "replay" => Ok(Box::new(ReplayBackend::open(need_path()?, None)?)),
        "record" => {
            let inner = HttpBackend::from_env(config)?;
            Ok(Box::new(ReplayBackend::open(need_path()?, Some(Box::new(inner)))?))
        }
        other => Err(LlmError::Config(format!("unknown backend '{other}'"))),
    }
}

/// Settings for building requests. The credential is never part of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: u64,
    pub encoding: ExampleEncoding,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint: DEFAULT_ENDPOINT.into(),
            model: DEFAULT_MODEL.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            timeout_secs: 120,
            encoding: ExampleEncoding::SystemName,
        }
    }
}

impl LlmConfig {
    /// `LLM_ENDPOINT` and `LLM_MODEL` override the configured values.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = std::env::var("LLM_ENDPOINT") {
            self.endpoint = v;
        }
        if let Ok(v) = std::env::var("LLM_MODEL") {
            self.model = v;
        }
        self
    }

    pub fn request(&self, messages: Vec<WireMessage>) -> CompletionRequest {
        CompletionRequest {
            model: self.model.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
}

#[derive(Deserialize)]
struct ChatMessage {
    content: Option<String>,
}

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    endpoint: String,
    api_key: String,
    backoff: Duration,
}

impl HttpBackend {
    pub fn new(endpoint: &str, api_key: &str, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Config(e.to_string()))?;
        Ok(Self {
            client,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
            backoff: Duration::from_millis(500),
        })
    }

    /// Reads the credential from `LLM_API_KEY`.
    pub fn from_env(config: &LlmConfig) -> Result<Self, LlmError> {
        let key = std::env::var("LLM_API_KEY")
            .map_err(|_| LlmError::Config("LLM_API_KEY is not set".into()))?;
        Self::new(&config.endpoint, &key, Duration::from_secs(config.timeout_secs))
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff = base;
        self
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<(String, Option<Usage>), LlmError> {
        let response = self
            .client
            .post(format!("{}/chat/completions", self.endpoint))
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| LlmError::Transport {
                message: e.to_string(),
                status: None,
                retryable: e.is_timeout() || e.is_connect(),
            })?;
        let status = response.status();
        let body = response.text().map_err(|e| LlmError::Transport {
            message: e.to_string(),
            status: Some(status.as_u16()),
            retryable: e.is_timeout(),
        })?;
        if !status.is_success() {
            return Err(LlmError::Transport {
                message: format!("HTTP {}: {}", status.as_u16(), body.chars().take(300).collect::<String>()),
                status: Some(status.as_u16()),
                retryable: status.is_server_error() || status.as_u16() == 429,
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&body).map_err(|e| LlmError::Transport {
            message: format!("malformed response body: {e}"),
            status: Some(status.as_u16()),
            retryable: false,
        })?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Transport {
                message: "response has no message content".into(),
                status: Some(status.as_u16()),
                retryable: false,
            })?;
        Ok((text, parsed.usage))
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &'static str {
        "http"
    }

    fn complete(&mut self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(request) {
                Ok((text, usage)) => return Ok(Completion { text, usage, attempts }),
                Err(LlmError::Transport { retryable: true, .. }) if attempts < MAX_ATTEMPTS => {
                    thread::sleep(self.backoff * 2u32.pow(attempts - 1));
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    /// Substring the last user message must contain.
    pub matcher: Option<String>,
    pub text: String,
}

/// Canned responses served in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedBackend {
    entries: Vec<ScriptEntry>,
    cursor: usize,
}

impl ScriptedBackend {
    pub fn new(responses: Vec<String>) -> Self {
        Self { entries: responses.into_iter().map(|text| ScriptEntry { matcher: None, text }).collect(), cursor: 0 }
    }

    /// Responses separated by lines consisting of `---`. A response whose first
    /// line is `match: <text>` is only served when the last user message
    /// contains `<text>`.
    pub fn parse(script: &str) -> Self {
        let mut entries = Vec::new();
        let mut current: Vec<&str> = Vec::new();
        let mut flush = |lines: &mut Vec<&str>| {
            let mut matcher = None;
            if let Some(first) = lines.first() {
                if let Some(m) = first.strip_prefix("match:") {
                    matcher = Some(m.trim().to_string());
                    lines.remove(0);
                }
            }
            let text = lines.join("\n").trim().to_string();
            if !text.is_empty() || matcher.is_some() {
                entries.push(ScriptEntry { matcher, text });
            }
            lines.clear();
        };
        for line in script.lines() {
            if line.trim_end() == "---" {
                flush(&mut current);
            } else {
                current.push(line);
            }
        }
        flush(&mut current);
        Self { entries, cursor: 0 }
    }

    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let text = fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        Ok(Self::parse(&text))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn set_cursor(&mut self, cursor: usize) {
        self.cursor = cursor.min(self.entries.len());
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &'static str {
        "scripted"
    }

    fn complete(&mut self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let Some(entry) = self.entries.get(self.cursor) else {
            return Err(LlmError::ScriptExhausted { used: self.cursor });
        };
        if let Some(m) = &entry.matcher {
            if !request.last_user_message().is_some_and(|u| u.contains(m.as_str())) {
                return Err(LlmError::ScriptMismatch { index: self.cursor, expected: m.clone() });
            }
        }
        self.cursor += 1;
        Ok(Completion { text: entry.text.clone(), usage: None, attempts: 1 })
    }

    fn resume_after(&mut self, calls: usize) {
        self.set_cursor(calls);
    }
}

#[derive(Serialize, Deserialize)]
struct ReplayRecord {
    hash: String,
    response: String,
}

/// Responses keyed by request hash. With an inner backend, misses are
/// forwarded and recorded.
pub struct ReplayBackend {
    cache: BTreeMap<String, String>,
    path: Option<PathBuf>,
    inner: Option<Box<dyn Backend>>,
}

impl ReplayBackend {
    pub fn new(inner: Option<Box<dyn Backend>>) -> Self {
        Self { cache: BTreeMap::new(), path: None, inner }
    }

    /// Loads `path` (JSON lines) if it exists; new recordings are appended to it.
    pub fn open(path: &Path, inner: Option<Box<dyn Backend>>) -> Result<Self, LlmError> {
        let mut cache = BTreeMap::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                let r: ReplayRecord =
                    serde_json::from_str(line).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
                cache.insert(r.hash, r.response);
            }
        }
        Ok(Self { cache, path: Some(path.to_path_buf()), inner })
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }
}

impl Backend for ReplayBackend {
    fn name(&self) -> &'static str {
        "replay"
    }

    fn complete(&mut self, request: &CompletionRequest) -> Result<Completion, LlmError> {
        let hash = request.hash();
        if let Some(text) = self.cache.get(&hash) {
            return Ok(Completion { text: text.clone(), usage: None, attempts: 0 });
        }
        let Some(inner) = self.inner.as_mut() else { return Err(LlmError::ReplayMiss(hash)) };
        let completion = inner.complete(request)?;
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&ReplayRecord { hash: hash.clone(), response: completion.text.clone() })
                .expect("replay record serializes");
            append_line(path, &line).map_err(|e| LlmError::Config(format!("{}: {e}", path.display())))?;
        }
        self.cache.insert(hash, completion.text.clone());
        Ok(completion)
    }
}

fn append_line(path: &Path, line: &str) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{line}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub timestamp: String,
    pub backend: String,
    pub model: String,
    pub request_hash: String,
    pub request: CompletionRequest,
    pub response: Option<String>,
    pub error: Option<String>,
    pub usage: Option<Usage>,
    pub attempts: u32,
    pub elapsed_ms: u64,
}

/// Append-only JSON-lines log of every completion call.
pub struct AuditLog {
    path: PathBuf,
    lock: Mutex<()>,
}

impl AuditLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into(), lock: Mutex::new(()) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: &AuditRecord) -> std::io::Result<()> {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        append_line(&self.path, &serde_json::to_string(record).expect("audit record serializes"))
    }

    pub fn read(path: &Path) -> std::io::Result<Vec<AuditRecord>> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let text = fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
            .collect()
    }
}

/// Calls the backend and writes exactly one audit record, whatever happens.
pub fn complete_logged(
    backend: &mut dyn Backend,
    request: &CompletionRequest,
    log: &AuditLog,
) -> Result<Completion, LlmError> {
    let started = Instant::now();
    let result = request.validate().and_then(|_| backend.complete(request));
    let record = AuditRecord {
        timestamp: chrono::Utc::now().to_rfc3339(),
        backend: backend.name().to_string(),
        model: request.model.clone(),
        request_hash: request.hash(),
        request: request.clone(),
        response: result.as_ref().ok().map(|c| c.text.clone()),
        error: result.as_ref().err().map(|e| e.to_string()),
        usage: result.as_ref().ok().and_then(|c| c.usage),
        attempts: result.as_ref().map(|c| c.attempts).unwrap_or(1),
        elapsed_ms: started.elapsed().as_millis() as u64,
    };
    if let Err(e) = log.append(&record) {
        tracing::warn!(path = %log.path().display(), error = %e, "could not write audit record");
    }
    result
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub prompt_per_1k: f64,
    pub completion_per_1k: f64,
}

impl Default for PriceTable {
    fn default() -> Self {
        Self { prompt_per_1k: 0.03, completion_per_1k: 0.06 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub cost: f64,
}

impl CostReport {
    fn add(&mut self, other: &CostReport) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.total_tokens += other.total_tokens;
        self.cost += other.cost;
    }
}

/// Sums reported usage. Calls without usage count as zero tokens.
pub fn record_cost(records: &[AuditRecord], prices: &PriceTable) -> CostReport {
    let mut report = CostReport::default();
    for r in records {
        report.calls += 1;
        if let Some(u) = r.usage {
            report.prompt_tokens += u.prompt_tokens;
            report.completion_tokens += u.completion_tokens;
            report.total_tokens += u.total_tokens.max(u.prompt_tokens + u.completion_tokens);
        }
    }
    report.cost = report.prompt_tokens as f64 / 1000.0 * prices.prompt_per_1k
        + report.completion_tokens as f64 / 1000.0 * prices.completion_per_1k;
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchCost {
    pub sessions: BTreeMap<String, CostReport>,
    pub total: CostReport,
}

pub fn batch_cost<'a>(
    sessions: impl IntoIterator<Item = (&'a str, &'a [AuditRecord])>,
    prices: &PriceTable,
) -> BatchCost {
    let mut out = BatchCost { sessions: BTreeMap::new(), total: CostReport::default() };
    for (id, records) in sessions {
        let r = record_cost(records, prices);
        out.total.add(&r);
        out.sessions.insert(id.to_string(), r);
    }
    out
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("no code block found")]
pub struct ExtractionError;

struct Block<'a> {
    tag: &'a str,
    lines: Vec<&'a str>,
}

fn fenced_blocks(text: &str) -> Vec<Block<'_>> {
    let mut blocks = Vec::new();
    let mut open: Option<Block> = None;
    for line in text.lines() {
        let t = line.trim();
        match open.as_mut() {
            Some(b) => {
                if t == "```" {
                    blocks.push(open.take().expect("open block"));
                } else {
                    b.lines.push(line);
                }
            }
            None => {
                if let Some(info) = t.strip_prefix("```") {
                    let tag = info.split_whitespace().next().unwrap_or("");
                    open = Some(Block { tag, lines: Vec::new() });
                }
            }
        }
    }
    if let Some(b) = open {
        blocks.push(b);
    }
    blocks
}

/// Contents of the first ```scenic block, else of the first fenced block.
pub fn extract_code(response: &str) -> Result<String, ExtractionError> {
    let blocks = fenced_blocks(response);
    let block = blocks
        .iter()
        .find(|b| b.tag.eq_ignore_ascii_case("scenic"))
        .or_else(|| blocks.first())
        .ok_or(ExtractionError)?;
    Ok(block.lines.join("\n").trim_end().to_string())
}
