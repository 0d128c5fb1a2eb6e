//! Batch evaluation: trace checkers, scripted judges, success curves and reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusEntry, Split};
use crate::llm::{open_backend, record_cost, AuditLog, Backend, PriceTable, ScriptedBackend};
use crate::prompt::TrainingExample;
use crate::road::load_network;
use crate::session::{
    accept, create_session, execute_code, repair_loop, user_comment, Context, DialogueSession, SessionConfig,
    SessionError, SessionState, SessionStore,
};
use crate::sim::Trace;

/// Named predicates over a trace, combined conjunctively. Absent fields are
/// not checked.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceChecker {
    /// Restricts distance predicates to this pair of agents.
    pub pair: Option<[String; 2]>,
    /// Closest approach must be at least this many meters.
    pub min_gap_at_least: Option<f64>,
    /// Closest approach must be below this many meters.
    pub min_gap_below: Option<f64>,
    /// Accepted termination labels, e.g. `TerminateWhen(0)`.
    pub termination: Vec<String>,
    pub no_collision: bool,
    /// Minimum distance travelled per agent.
    pub travel: BTreeMap<String, f64>,
}

impl TraceChecker {
    /// Smallest center distance over all snapshots, for the configured pair or
    /// any pair of agents.
    pub fn closest_approach(&self, trace: &Trace) -> Option<f64> {
        let pairs: Vec<(usize, usize)> = match &self.pair {
            Some([a, b]) => match (trace.agent_index(a), trace.agent_index(b)) {
                (Some(i), Some(j)) => vec![(i, j)],
                _ => return None,
            },
            None => {
                let n = trace.agents.len();
                (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
            }
        };
        let mut best: Option<f64> = None;
        for s in &trace.snapshots {
            for &(i, j) in &pairs {
                let d = s.agents[i].position.distance(s.agents[j].position);
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
        best
    }

    pub fn travelled(trace: &Trace, agent: &str) -> Option<f64> {
        let i = trace.agent_index(agent)?;
        Some(trace.snapshots.windows(2).map(|w| w[0].agents[i].position.distance(w[1].agents[i].position)).sum())
    }

    /// Failed predicate descriptions; empty when the trace passes.
    pub fn check(&self, trace: &Trace) -> Vec<String> {
        let mut failures = Vec::new();
        let gap = self.closest_approach(trace);
        if let Some(min) = self.min_gap_at_least {
            match gap {
                Some(g) if g >= min => {}
                Some(g) => failures.push(format!("closest approach {g:.2} m is below {min} m")),
                None => failures.push("no agent pair to measure".into()),
            }
        }
        if let Some(max) = self.min_gap_below {
            match gap {
                Some(g) if g < max => {}
                Some(g) => failures.push(format!("closest approach {g:.2} m is not below {max} m")),
                None => failures.push("no agent pair to measure".into()),
            }
        }
        let label = trace.termination.label();
        if !self.termination.is_empty() && !self.termination.contains(&label) {
            failures.push(format!("terminated by {label}, expected one of {}", self.termination.join(", ")));
        }
        if self.no_collision && trace.events.iter().any(|e| matches!(e.kind, crate::sim::EventKind::Collision { .. })) {
            failures.push("agents collided".into());
        }
        for (agent, min) in &self.travel {
            match Self::travelled(trace, agent) {
                Some(d) if d >= *min => {}
                Some(d) => failures.push(format!("{agent} travelled {d:.2} m, expected at least {min} m")),
                None => failures.push(format!("no agent named {agent}")),
            }
        }
        failures
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no records to summarize")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scenario: String,
    pub outcome: Outcome,
    pub success_turn: Option<u32>,
    /// Every query issued before acceptance, failed turns included.
    pub queries_at_success: Option<u32>,
    pub queries_per_turn: Vec<u32>,
    #[serde(default)]
    pub cost: f64,
    #[serde(default)]
    pub wall_ms: u64,
    #[serde(default)]
    pub error: Option<String>,
}

impl EvalRecord {
    pub fn success(scenario: &str, turn: u32, queries_per_turn: Vec<u32>) -> Self {
        let total = queries_per_turn.iter().sum();
        Self {
            scenario: scenario.into(),
            outcome: Outcome::Success,
            success_turn: Some(turn),
            queries_at_success: Some(total),
            queries_per_turn,
            cost: 0.0,
            wall_ms: 0,
            error: None,
        }
    }

    pub fn failure(scenario: &str, queries_per_turn: Vec<u32>) -> Self {
        Self {
            scenario: scenario.into(),
            outcome: Outcome::Failure,
            success_turn: None,
            queries_at_success: None,
            queries_per_turn,
            cost: 0.0,
            wall_ms: 0,
            error: None,
        }
    }

    pub fn total_queries(&self) -> u32 {
        self.queries_per_turn.iter().sum()
    }
}

/// Element k-1 is the fraction of records that succeeded within k turns.
pub fn cumulative_success_by_turn(records: &[EvalRecord], max_turns: u32) -> Result<Vec<f64>, MetricsError> {
    cumulative(records, max_turns, |r| r.success_turn)
}

/// Element q-1 is the fraction of records that succeeded within q queries.
pub fn cumulative_success_by_queries(records: &[EvalRecord], max_queries: u32) -> Result<Vec<f64>, MetricsError> {
    cumulative(records, max_queries, |r| r.queries_at_success)
}

fn cumulative(records: &[EvalRecord], len: u32, key: impl Fn(&EvalRecord) -> Option<u32>) -> Result<Vec<f64>, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = records.len() as f64;
    Ok((1..=len)
        .map(|k| {
            records.iter().filter(|r| r.outcome == Outcome::Success && key(r).is_some_and(|v| v <= k)).count() as f64 / n
        })
        .collect())
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Backend(#[from] crate::llm::LlmError),
    #[error(transparent)]
    Session(#[from] crate::session::SessionError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Records { path: String, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub session: SessionConfig,
    /// `http`, `replay:<file>`, `record:<file>`, `scripted:<file>` (one
    /// script for every scenario) or `scripted-dir:<dir>` (`<dir>/<id>.script`).
    pub backend: String,
    pub out: PathBuf,
    pub workers: usize,
    pub prices: PriceTable,
}

/// Comment sent when a turn ends without executable code and the scenario
/// has no scripted comment left.
pub const FALLBACK_HINT: &str = "The program does not run. Please fix the reported errors and return the complete program.";

pub fn backend_for(spec: &str, scenario: &str, config: &crate::llm::LlmConfig) -> Result<Box<dyn Backend>, HarnessError> {
    if let Some(dir) = spec.strip_prefix("scripted-dir:") {
        let path = Path::new(dir).join(format!("{scenario}.script"));
        return Ok(Box::new(ScriptedBackend::load(&path)?));
    }
    Ok(open_backend(spec, config)?)
}

/// The scripted user: accepts when the checker passes on every scene (or,
/// without a checker, once the scripted comments are used up); otherwise
/// sends the next comment.
struct Judge<'a> {
    checker: Option<&'a TraceChecker>,
    comments: std::slice::Iter<'a, String>,
}

enum Verdict {
    Accept,
    Comment(String),
}

impl Judge<'_> {
    fn judge(&mut self, traces: &[Trace]) -> Verdict {
        match self.checker {
            Some(checker) => {
                let failures: Vec<String> = traces.iter().flat_map(|t| checker.check(t)).collect();
                if failures.is_empty() {
                    return Verdict::Accept;
                }
                let comment = self.comments.next().cloned().unwrap_or_else(|| {
                    let mut unique: Vec<String> = Vec::new();
                    for f in failures {
                        if !unique.contains(&f) {
                            unique.push(f);
                        }
                    }
                    format!("The scenario does not match the description: {}.", unique.join("; "))
                });
                Verdict::Comment(comment)
            }
            None => match self.comments.next() {
                Some(c) => Verdict::Comment(c.clone()),
                None => Verdict::Accept,
            },
        }
    }

    fn hint(&mut self) -> String {
        self.comments.next().cloned().unwrap_or_else(|| FALLBACK_HINT.to_string())
    }
}

fn load_traces(store: &SessionStore, session: &DialogueSession) -> Result<Vec<Trace>, HarnessError> {
    let turn = session.current().expect("session has a turn");
    turn.traces
        .iter()
        .map(|rel| {
            let path = store.dir(&session.id).join(rel);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            Trace::from_jsonl(&text).map_err(|e| HarnessError::Records { path: path.display().to_string(), message: e.to_string() })
        })
        .collect()
}

/// Runs one scenario to a terminal state.
pub fn run_scenario(
    corpus: &Corpus,
    entry: &CorpusEntry,
    training: &[TrainingExample],
    config: &BatchConfig,
) -> Result<EvalRecord, HarnessError> {
    let store = SessionStore::new(config.out.join("sessions"));
    let dir = store.dir(&entry.id);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut session_config = config.session.clone();
    if let Some(map) = &entry.map {
        session_config.map = map.clone();
    }
    let description = corpus.description(entry)?;
    let mut backend = backend_for(&config.backend, &entry.id, &session_config.llm)?;
    let ctx = Context::new(&store);
    let mut session = create_session(&ctx, Some(entry.id.clone()), &description, &session_config, training)?;
    repair_loop(&ctx, &mut session, backend.as_mut())?;
    let mut judge = Judge { checker: entry.checker.as_ref(), comments: entry.comments.iter() };
    loop {
        let comment = match session.state {
            SessionState::AwaitingUser => match judge.judge(&load_traces(&store, &session)?) {
                Verdict::Accept => {
                    accept(&ctx, &mut session)?;
                    break;
                }
                Verdict::Comment(c) => c,
            },
            SessionState::NeedsUserHelp => judge.hint(),
            _ => break,
        };
        match user_comment(&ctx, &mut session, &comment, backend.as_mut()) {
            Ok(()) | Err(SessionError::TurnsExhausted(_)) => {}
            Err(e) => return Err(e.into()),
        }
    }
    let mut record = if session.state == SessionState::Succeeded {
        EvalRecord::success(&entry.id, session.turn(), session.queries_per_turn())
    } else {
        EvalRecord::failure(&entry.id, session.queries_per_turn())
    };
    let audit = AuditLog::read(&dir.join("llm.log")).map_err(io_err(&dir))?;
    record.cost = record_cost(&audit, &config.prices).cost;
    Ok(record)
}

/// One session per test scenario. Per-scenario errors become failures.
/// Records come back sorted by scenario id.
pub fn run_batch(corpus: &Corpus, config: &BatchConfig) -> Result<Vec<EvalRecord>, HarnessError> {
    let training = corpus.training_examples()?;
    let entries: Vec<&CorpusEntry> = corpus.split(Split::Test).collect();
    if entries.is_empty() {
        tracing::warn!(corpus = %corpus.root.display(), "corpus has no test scenarios");
        return Ok(Vec::new());
    }
    fs::create_dir_all(&config.out).map_err(io_err(&config.out))?;
    let next = Mutex::new(entries.iter());
    let results = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..config.workers.max(1).min(entries.len()) {
            scope.spawn(|| loop {
                let Some(entry) = next.lock().unwrap_or_else(|e| e.into_inner()).next().copied() else { break };
                let started = Instant::now();
                let mut record = run_scenario(corpus, entry, &training, config).unwrap_or_else(|e| {
                    tracing::warn!(scenario = %entry.id, error = %e, "scenario failed to run");
                    let mut r = EvalRecord::failure(&entry.id, Vec::new());
                    r.error = Some(e.to_string());
                    r
                });
                record.wall_ms = started.elapsed().as_millis() as u64;
                results.lock().unwrap_or_else(|e| e.into_inner()).push(record);
            });
        }
    });
    let mut records = results.into_inner().unwrap_or_else(|e| e.into_inner());
    records.sort_by(|a, b| a.scenario.cmp(&b.scenario));
    Ok(records)
}

pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, serde_json::to_string_pretty(records).expect("records serialize")).map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Records { path: path.display().to_string(), message: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub scenarios: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub max_turns: u32,
    pub max_queries: u32,
    pub by_turn: Vec<f64>,
    pub by_queries: Vec<f64>,
    pub total_cost: f64,
}

fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

/// Writes `cdf.csv`, `scenarios.csv` and `summary.json` into `dir`.
/// The by-queries axis runs to `max_turns * max_queries`.
pub fn emit_report(records: &[EvalRecord], dir: &Path, max_turns: u32, max_queries: u32) -> Result<ReportSummary, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let total_queries = max_turns * max_queries;
    let (by_turn, by_queries) = match (
        cumulative_success_by_turn(records, max_turns),
        cumulative_success_by_queries(records, total_queries),
    ) {
        (Ok(t), Ok(q)) => (t, q),
        _ => (Vec::new(), Vec::new()),
    };

    let mut cdf = csv::Writer::from_path(dir.join("cdf.csv"))?;
    cdf.write_record(["axis", "x", "cumulative_success"])?;
    for (axis, values) in [("turn", &by_turn), ("queries", &by_queries)] {
        for (i, v) in values.iter().enumerate() {
            cdf.write_record([axis.to_string(), (i + 1).to_string(), format!("{v:.4}")])?;
        }
    }
    cdf.flush().map_err(io_err(dir))?;

    let mut table = csv::Writer::from_path(dir.join("scenarios.csv"))?;
    table.write_record(["scenario", "outcome", "success_turn", "queries_at_success", "total_queries", "queries_per_turn", "cost", "error"])?;
    let opt = |v: Option<u32>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        table.write_record([
            r.scenario.clone(),
            match r.outcome {
                Outcome::Success => "success".into(),
                Outcome::Failure => "failure".into(),
            },
            opt(r.success_turn),
            opt(r.queries_at_success),
            r.total_queries().to_string(),
            r.queries_per_turn.iter().map(u32::to_string).collect::<Vec<_>>().join(";"),
            format!("{:.4}", r.cost),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    table.flush().map_err(io_err(dir))?;

    let successes = records.iter().filter(|r| r.outcome == Outcome::Success).count();
    let summary = ReportSummary {
        scenarios: records.len(),
        successes,
        success_rate: if records.is_empty() { 0.0 } else { round4(successes as f64 / records.len() as f64) },
        max_turns,
        max_queries,
        by_turn: by_turn.iter().copied().map(round4).collect(),
        by_queries: by_queries.iter().copied().map(round4).collect(),
        total_cost: round4(records.iter().map(|r| r.cost).sum()),
    };
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serializes")).map_err(io_err(&path))?;
    Ok(summary)
}

/// Re-checks a successful scenario from its stored artifacts: the final code
/// compiles, its seeds re-sample and re-simulate to the stored traces, and
/// the checker still passes.
pub fn revalidate(store: &SessionStore, id: &str, checker: Option<&TraceChecker>) -> Result<Vec<String>, HarnessError> {
    let session = store.load(id)?;
    let Some(summary) = store.summary(id)? else { return Ok(vec!["session has no summary".into()]) };
    let network = load_network(&summary.map).map_err(SessionError::from)?;
    let mut problems = Vec::new();
    match execute_code(&summary.final_code, &network, &summary.seeds, &session.config.sim) {
        Err(d) => problems.push(format!("final code no longer runs: {}", crate::dsl::diagnostic::render_all(&d))),
        Ok(run) => {
            let stored = load_traces(store, &session)?;
            for (j, (_, trace)) in run.scenes.iter().enumerate() {
                if stored.get(j).map(Trace::to_jsonl) != Some(trace.to_jsonl()) {
                    problems.push(format!("scene {j} does not replay identically"));
                }
                if let Some(c) = checker {
                    problems.extend(c.check(trace).into_iter().map(|f| format!("scene {j}: {f}")));
                }
            }
        }
    }
    Ok(problems)
}
