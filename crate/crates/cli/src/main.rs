//! `collab`: run the service, replay scripted conversations, inspect
//! memory scores and preview persona prompts.

use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use collab_core::clock::SystemClock;
use collab_core::embedding::{Embedder, HashEmbedder};
use collab_core::experiment::{BackendKind, ExperimentConfig};
use collab_core::memory::{MemoryStore, RetrievalQuery, RetrievalWeights, ScoredMemory, DEFAULT_K, DEFAULT_LAMBDA};
use collab_core::persistence::{compute_analytics, decode_log, TagLexicon};
use collab_core::persona::{compile_system_prompt, DescriptorTable, PersonaSpec, DEFAULT_MAX_PROMPT_CHARS};
use collab_core::simulation::{run_simulation, SimulationError, SimulationScript};
use collab_service::{AppState, ConfigError, ServiceConfig};
use serde::Serialize;

mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const VALIDATION: u8 = 4;
    pub const RUNTIME: u8 = 5;
    pub const IO: u8 = 6;
    pub const PORT_IN_USE: u8 = 7;
}

#[derive(Parser)]
#[command(name = "collab", version, about = "AI teammate for multi-party chat experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the researcher API and session workers.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the model backend of every experiment.
        #[arg(long, value_enum)]
        backend: Option<Backend>,
    },
    /// Replay a scripted conversation offline and write its artifacts.
    Simulate {
        #[arg(long)]
        script: PathBuf,
        /// Experiment configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<Backend>,
        /// Descriptor table; the built-in table when omitted.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Score every record of a memory log against a query.
    Score {
        /// Memory log (`memory.jsonl`).
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = DEFAULT_K as u64, value_parser = clap::value_parser!(u64).range(1..))]
        k: u64,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        /// Recency decay per second. Default gives a one hour half-life.
        #[arg(long, default_value_t = DEFAULT_LAMBDA)]
        lambda: f64,
        /// Query time in unix seconds. Defaults to the newest record.
        #[arg(long)]
        now: Option<f64>,
        /// Only score records of this channel.
        #[arg(long)]
        channel: Option<String>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Recompute analytics from an exported event log.
    Analyze {
        /// Event log (`events.jsonl`).
        #[arg(long)]
        log: PathBuf,
        /// Experiment configuration supplying the tag lexicon; the starter
        /// lexicon when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the system prompt compiled from a persona spec.
    Persona {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        table: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Backend {
    Scripted,
    Echo,
    Remote,
}

impl From<Backend> for BackendKind {
    fn from(b: Backend) -> Self {
        match b {
            Backend::Scripted => BackendKind::Scripted,
            Backend::Echo => BackendKind::Echo,
            Backend::Remote => BackendKind::Remote,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl std::fmt::Display) -> Failure {
    Failure {
        code,
        message: message.to_string(),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| fail(exit::IO, format!("cannot read {}: {e}", path.display())))
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, code: u8) -> Result<T, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| fail(code, format!("{}: {e}", path.display())))
}

fn load_table(path: Option<&Path>) -> Result<DescriptorTable, Failure> {
    match path {
        None => Ok(DescriptorTable::default_table()),
        Some(p) => {
            DescriptorTable::parse(&read(p)?).map_err(|e| fail(exit::VALIDATION, format!("{}: {e}", p.display())))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Serve { config, backend } => serve(&config, backend),
        Command::Simulate {
            script,
            config,
            out,
            backend,
            table,
        } => simulate(&script, &config, &out, backend, table.as_deref()),
        Command::Score {
            log,
            query,
            k,
            alpha,
            beta,
            gamma,
            lambda,
            now,
            channel,
            format,
        } => RetrievalWeights::new(alpha, beta, gamma)
            .map_err(|e| fail(exit::VALIDATION, e))
            .and_then(|weights| score(&log, query, k as usize, weights, lambda, now, channel, format)),
        Command::Analyze { log, config } => analyze(&log, config.as_deref()),
        Command::Persona { spec, table } => persona(&spec, table.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn serve(path: &Path, backend: Option<Backend>) -> Result<(), Failure> {
    let mut config = ServiceConfig::load(path).map_err(|e| match e {
        ConfigError::Read { .. } => fail(exit::IO, e),
        ConfigError::Invalid(_) => fail(exit::CONFIG, e),
    })?;
    if let Some(b) = backend {
        config.backend = Some(b.into());
    }
    let resolved = config
        .resolve(|var| std::env::var(var).ok())
        .map_err(|e| fail(exit::CONFIG, e))?;
    // bound before anything else so a busy port is reported plainly
    let listener = std::net::TcpListener::bind(resolved.bind).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => fail(exit::PORT_IN_USE, format!("{} is already in use", resolved.bind)),
        _ => fail(exit::IO, format!("cannot bind {}: {e}", resolved.bind)),
    })?;
    let addr = listener.local_addr().map_err(|e| fail(exit::IO, e))?;
    listener.set_nonblocking(true).map_err(|e| fail(exit::IO, e))?;

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| fail(exit::RUNTIME, e))?;
    runtime.block_on(async move {
        let state = AppState::new(config, resolved, Arc::new(SystemClock)).map_err(|e| fail(exit::IO, e))?;
        let listener = tokio::net::TcpListener::from_std(listener).map_err(|e| fail(exit::IO, e))?;
        println!("listening on http://{addr}");
        let _ = std::io::stdout().flush();
        collab_service::serve(listener, state, shutdown_signal())
            .await
            .map_err(|e| fail(exit::RUNTIME, e))
    })
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = tokio::signal::ctrl_c() => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = tokio::signal::ctrl_c().await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn simulate(
    script: &Path,
    config: &Path,
    out: &Path,
    backend: Option<Backend>,
    table: Option<&Path>,
) -> Result<(), Failure> {
    let script: SimulationScript = parse_json(script, exit::VALIDATION)?;
    let mut config: ExperimentConfig = parse_json(config, exit::CONFIG)?;
    if let Some(b) = backend {
        config.gateway.backend = b.into();
    }
    let table = load_table(table)?;
    let output = run_simulation(&script, &config, &table).map_err(|e| match e {
        SimulationError::Script(_) | SimulationError::Compile(_) => fail(exit::VALIDATION, e),
        SimulationError::Config(_) => fail(exit::CONFIG, e),
        SimulationError::Session(_) => fail(exit::RUNTIME, e),
    })?;
    output
        .write_to(out)
        .map_err(|e| fail(exit::IO, format!("cannot write {}: {e}", out.display())))?;
    let replies = output.steps.iter().filter(|s| s.handled.reply.is_some()).count();
    println!(
        "{} events, {} bot replies, {} rejected lines -> {}",
        output.events.len(),
        replies,
        output.rejected,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    rank: usize,
    id: u64,
    kind: collab_core::memory::RecordKind,
    speaker_id: &'a str,
    channel_id: &'a str,
    created_at: f64,
    recency: f64,
    relevance: f64,
    importance: f64,
    composite: f64,
    top_k: bool,
}

#[allow(clippy::too_many_arguments)]
fn score(
    log: &Path,
    query: String,
    k: usize,
    weights: RetrievalWeights,
    lambda: f64,
    now: Option<f64>,
    channel: Option<String>,
    format: Format,
) -> Result<(), Failure> {
    let file = std::fs::File::open(log).map_err(|e| fail(exit::IO, format!("cannot read {}: {e}", log.display())))?;
    let store = MemoryStore::read_log(BufReader::new(file))
        .map_err(|e| fail(exit::VALIDATION, format!("{}: {e}", log.display())))?;
    let mut top = std::collections::HashSet::new();
    let rows: Vec<ScoredMemory> = match store {
        None => Vec::new(),
        Some(store) => {
            let embedder = HashEmbedder::new(store.dimension());
            if store.config().embedder_version != embedder.version() {
                return Err(fail(
                    exit::VALIDATION,
                    format!(
                        "log was embedded with {}, this command embeds queries with {}",
                        store.config().embedder_version,
                        embedder.version()
                    ),
                ));
            }
            let query_embedding = embedder
                .embed(&query)
                .map_err(|e| fail(exit::VALIDATION, format!("query: {e}")))?;
            let now = now.unwrap_or_else(|| store.records().map(|r| r.created_at).fold(0.0, f64::max));
            let q = RetrievalQuery {
                query_text: query,
                query_embedding,
                now,
                k,
                lambda,
                weights,
                channel_id: channel,
            };
            let mut all = store.score_all(&q).map_err(|e| fail(exit::VALIDATION, e))?;
            all.sort_by(ScoredMemory::rank_cmp);
            top.extend(
                store
                    .retrieve_top_k(&q)
                    .map_err(|e| fail(exit::VALIDATION, e))?
                    .iter()
                    .map(|m| m.record.id),
            );
            all
        }
    };
    let rows: Vec<ScoreRow> = rows
        .iter()
        .enumerate()
        .map(|(i, m)| ScoreRow {
            rank: i + 1,
            id: m.record.id,
            kind: m.record.kind,
            speaker_id: &m.record.speaker_id,
            channel_id: &m.record.channel_id,
            created_at: m.record.created_at,
            recency: m.recency,
            relevance: m.relevance,
            importance: m.importance,
            composite: m.composite,
            top_k: top.contains(&m.record.id),
        })
        .collect();

    let mut out = std::io::stdout().lock();
    let written = match format {
        Format::Json => serde_json::to_writer_pretty(&mut out, &rows)
            .map_err(std::io::Error::from)
            .and_then(|_| writeln!(out)),
        Format::Table => write_table(&mut out, &rows),
    };
    written.map_err(|e| fail(exit::IO, e))
}

fn write_table(out: &mut impl Write, rows: &[ScoreRow]) -> std::io::Result<()> {
    writeln!(
        out,
        "{:>5} {:>6} {:<11} {:>16} {:>9} {:>9} {:>10} {:>9}  top",
        "rank", "id", "kind", "created_at", "recency", "relevance", "importance", "composite"
    )?;
    for r in rows {
        let kind = serde_json::to_value(r.kind)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        writeln!(
            out,
            "{:>5} {:>6} {:<11} {:>16.3} {:>9.6} {:>9.6} {:>10.6} {:>9.6}  {}",
            r.rank,
            r.id,
            kind,
            r.created_at,
            r.recency,
            r.relevance,
            r.importance,
            r.composite,
            if r.top_k { "*" } else { "" }
        )?;
    }
    Ok(())
}

fn analyze(log: &Path, config: Option<&Path>) -> Result<(), Failure> {
    let lexicon = match config {
        Some(path) => parse_json::<ExperimentConfig>(path, exit::CONFIG)?.tag_lexicon,
        None => TagLexicon::starter(),
    };
    let (session_id, events) =
        decode_log(&read(log)?).map_err(|e| fail(exit::VALIDATION, format!("{}: {e}", log.display())))?;
    let snapshot = compute_analytics(&session_id, &events, &lexicon);
    let text = serde_json::to_string_pretty(&snapshot).map_err(|e| fail(exit::RUNTIME, e))?;
    println!("{text}");
    Ok(())
}

fn persona(spec: &Path, table: Option<&Path>) -> Result<(), Failure> {
    let spec: PersonaSpec = parse_json(spec, exit::VALIDATION)?;
    let table = load_table(table)?;
    let prompt =
        compile_system_prompt(&spec, &table, DEFAULT_MAX_PROMPT_CHARS).map_err(|e| fail(exit::VALIDATION, e))?;
    println!("{prompt}");
    Ok(())
}
