use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use scenario_loop::corpus::Corpus;
use scenario_loop::dsl::{compile, parse, validate, SymbolTable};
use scenario_loop::harness::{emit_report, read_records, run_batch, write_records, BatchConfig};
use scenario_loop::llm::{open_backend, PriceTable};
use scenario_loop::prompt::TrainingExample;
use scenario_loop::road::load_network;
use scenario_loop::sample::sample_scene;
use scenario_loop::session::{
    accept, create_session, repair_loop, resume, user_comment, Context, DialogueSession, SessionConfig, SessionStore,
    CONFIG_FILE,
};
use scenario_loop::sim::run_scene;

#[derive(Parser)]
#[command(name = "scenario-loop", version, about = "Generate driving scenarios from descriptions through an LLM dialogue")]
struct Cli {
    /// Configuration file; missing means defaults.
    #[arg(long, global = true, default_value = CONFIG_FILE)]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scenario language tools.
    Dsl {
        #[command(subcommand)]
        command: DslCommand,
    },
    /// Sample scenes from a program and print them as JSON lines.
    Sample(SampleArgs),
    /// Sample one scene, simulate it and write the trace.
    Sim(SimArgs),
    /// Drive a dialogue session.
    Session {
        #[command(subcommand)]
        command: SessionCommand,
    },
    /// Batch evaluation over a corpus.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
    /// Serve the session API and the workbench client.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum DslCommand {
    /// Print diagnostics; exit status 0 iff there are none.
    Check { file: PathBuf },
}

#[derive(Args)]
struct SampleArgs {
    file: PathBuf,
    #[arg(long)]
    map: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scenes for seeds seed, seed+1, ...
    #[arg(long, default_value_t = 1)]
    count: u64,
}

#[derive(Args)]
struct SimArgs {
    file: PathBuf,
    #[arg(long)]
    map: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct SessionFlags {
    /// http, scripted:<file>, replay:<file> or record:<file>
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    map: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    max_turns: Option<u32>,
    #[arg(long)]
    max_queries: Option<u32>,
    #[arg(long)]
    seeds: Option<u32>,
    #[arg(long)]
    sessions_dir: Option<PathBuf>,
}

impl SessionFlags {
    fn apply(&self, c: &mut SessionConfig) {
        if let Some(v) = &self.backend {
            c.backend = v.clone();
        }
        if let Some(v) = &self.map {
            c.map = v.clone();
        }
        if let Some(v) = self.budget {
            c.budget = v;
        }
        if let Some(v) = self.max_turns {
            c.max_turns = v;
        }
        if let Some(v) = self.max_queries {
            c.max_queries = v;
        }
        if let Some(v) = self.seeds {
            c.seeds = v;
        }
        if let Some(v) = &self.sessions_dir {
            c.sessions_dir = v.clone();
        }
    }
}

#[derive(Subcommand)]
enum SessionCommand {
    /// Create a session and run its first turn.
    New {
        #[arg(long)]
        description: String,
        /// Session id; a random one otherwise.
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        flags: SessionFlags,
    },
    /// Send a comment and run the next turn.
    Comment {
        id: String,
        text: String,
        #[command(flatten)]
        flags: SessionFlags,
    },
    /// Accept the current turn.
    Accept {
        id: String,
        #[command(flatten)]
        flags: SessionFlags,
    },
    /// Continue a session interrupted while generating.
    Resume {
        id: String,
        #[command(flatten)]
        flags: SessionFlags,
    },
    Show {
        id: String,
        /// Print the stored session as JSON.
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        flags: SessionFlags,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Run every test scenario and write records and reports into --out.
    Run {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Backend spec; scripted-dir:<dir> reads <dir>/<id>.script per scenario.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Rebuild reports from a records file.
    Report {
        #[arg(long)]
        records: PathBuf,
        /// Defaults to the directory holding the records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    /// Directory with the built workbench client, served under /ui.
    #[arg(long)]
    ui: Option<PathBuf>,
    #[command(flatten)]
    flags: SessionFlags,
}

/// File, then flags, then environment.
fn load_config(path: &Path, flags: &SessionFlags) -> Result<SessionConfig> {
    let mut config = SessionConfig::load(path)?;
    flags.apply(&mut config);
    config.apply_env()?;
    Ok(config)
}

fn training(config: &SessionConfig) -> Result<Vec<TrainingExample>> {
    if !config.corpus.join("manifest.toml").exists() {
        tracing::warn!(corpus = %config.corpus.display(), "no corpus found; prompting without examples");
        return Ok(Vec::new());
    }
    Ok(Corpus::load(&config.corpus)?.training_examples()?)
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn print_session(store: &SessionStore, s: &DialogueSession) {
    println!("session {} ({})", s.id, s.state.as_str());
    for t in &s.turns {
        let opened = t.comment.as_deref().map(|c| format!(" after \"{c}\"")).unwrap_or_default();
        println!("turn {}{opened}: {} queries", t.turn, t.queries_used());
        for q in &t.queries {
            match &q.feedback {
                Some(f) => println!("  query {}: {}", q.query, f.lines().next().unwrap_or_default()),
                None => println!("  query {}: executable", q.query),
            }
        }
        if let Some(h) = &t.halted {
            println!("  halted: {h}");
        }
        for (seed, trace) in t.seeds.iter().zip(&t.traces) {
            println!("  seed {seed}: {}", store.dir(&s.id).join(trace).display());
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Dsl { command: DslCommand::Check { file } } => {
            let text = read(&file)?;
            let diagnostics = match parse(&text) {
                Ok(program) => validate(&program, &SymbolTable::standard()),
                Err(d) => d,
            };
            for d in &diagnostics {
                println!("{}: {}", file.display(), d.render());
            }
            Ok(if diagnostics.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Sample(args) => {
            let config = load_config(&cli.config, &SessionFlags::default())?;
            let network = load_network(args.map.as_deref().unwrap_or(&config.map))?;
            let program = compile(&read(&args.file)?, &SymbolTable::standard())
                .map_err(|d| anyhow::anyhow!(scenario_loop::dsl::diagnostic::render_all(&d)))?;
            for seed in args.seed..args.seed + args.count {
                let scene = sample_scene(&program, &network, seed).map_err(|e| anyhow::anyhow!(e.to_diagnostic().render()))?;
                println!("{}", serde_json::to_string(&scene)?);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sim(args) => {
            let config = load_config(&cli.config, &SessionFlags::default())?;
            let network = load_network(args.map.as_deref().unwrap_or(&config.map))?;
            let program = compile(&read(&args.file)?, &SymbolTable::standard())
                .map_err(|d| anyhow::anyhow!(scenario_loop::dsl::diagnostic::render_all(&d)))?;
            let scene = sample_scene(&program, &network, args.seed).map_err(|e| anyhow::anyhow!(e.to_diagnostic().render()))?;
            let trace = run_scene(&program, &scene, &network, &config.sim).map_err(|d| anyhow::anyhow!(d.render()))?;
            match args.out {
                Some(path) => fs::write(&path, trace.to_jsonl()).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{}", trace.to_jsonl()),
            }
            eprintln!("{} steps, {:.2} s, ended by {}", trace.snapshots.len(), trace.duration, trace.termination.label());
            Ok(ExitCode::SUCCESS)
        }
        Command::Session { command } => session_command(&cli.config, command),
        Command::Eval { command } => eval_command(&cli.config, command),
        Command::Serve(args) => {
            let config = load_config(&cli.config, &args.flags)?;
            let training = training(&config)?;
            let state = scenario_loop_server::AppState::from_config(config, training)?;
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let resumed = state.resume_interrupted()?;
                if !resumed.is_empty() {
                    tracing::info!(sessions = ?resumed, "resumed interrupted sessions");
                }
                scenario_loop_server::serve(state, args.ui, &args.addr).await?;
                Ok::<_, anyhow::Error>(())
            })?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn session_command(config_path: &Path, command: SessionCommand) -> Result<ExitCode> {
    let flags = match &command {
        SessionCommand::New { flags, .. }
        | SessionCommand::Comment { flags, .. }
        | SessionCommand::Accept { flags, .. }
        | SessionCommand::Resume { flags, .. }
        | SessionCommand::Show { flags, .. } => flags,
    };
    let config = load_config(config_path, flags)?;
    let store = SessionStore::new(&config.sessions_dir);
    let ctx = Context::new(&store);
    match command {
        SessionCommand::New { description, id, .. } => {
            let training = training(&config)?;
            let mut backend = open_backend(&config.backend, &config.llm)?;
            let mut session = create_session(&ctx, id, &description, &config, &training)?;
            repair_loop(&ctx, &mut session, backend.as_mut())?;
            print_session(&store, &session);
        }
        SessionCommand::Comment { id, text, .. } => {
            let mut session = store.load(&id)?;
            let mut backend = open_backend(&config.backend, &config.llm)?;
            backend.resume_after(session.total_queries() as usize);
            user_comment(&ctx, &mut session, &text, backend.as_mut())?;
            print_session(&store, &session);
        }
        SessionCommand::Accept { id, .. } => {
            let mut session = store.load(&id)?;
            let summary = accept(&ctx, &mut session)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        SessionCommand::Resume { id, .. } => {
            let mut backend = open_backend(&config.backend, &config.llm)?;
            let session = resume(&ctx, &id, backend.as_mut())?;
            print_session(&store, &session);
        }
        SessionCommand::Show { id, json, .. } => {
            let session = store.load(&id)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&session)?);
            } else {
                print_session(&store, &session);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_command(config_path: &Path, command: EvalCommand) -> Result<ExitCode> {
    let mut config = load_config(config_path, &SessionFlags::default())?;
    match command {
        EvalCommand::Run { corpus, backend, out, workers } => {
            if let Some(c) = corpus {
                config.corpus = c;
            }
            let backend = backend.unwrap_or_else(|| config.backend.clone());
            if workers == 0 {
                bail!("--workers must be at least 1");
            }
            let corpus = Corpus::load(&config.corpus)?;
            let (max_turns, max_queries) = (config.max_turns, config.max_queries);
            let batch = BatchConfig { session: config, backend, out: out.clone(), workers, prices: PriceTable::default() };
            let records = run_batch(&corpus, &batch)?;
            write_records(&out.join("records.json"), &records)?;
            let summary = emit_report(&records, &out, max_turns, max_queries)?;
            println!(
                "{}/{} scenarios succeeded, cost {:.4}; reports in {}",
                summary.successes,
                summary.scenarios,
                summary.total_cost,
                out.display()
            );
        }
        EvalCommand::Report { records, out } => {
            let rs = read_records(&records)?;
            let dir = out.unwrap_or_else(|| records.parent().map(Path::to_path_buf).unwrap_or_default());
            let summary = emit_report(&rs, &dir, config.max_turns, config.max_queries)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
