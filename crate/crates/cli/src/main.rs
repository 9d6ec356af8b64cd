//! `cdr-agent`: run, evaluate and serve the clinical decision rule agent.
//!
//! Exit status is 0 on success, 1 on any error, 2 on bad usage, and 3 when
//! `analyze` finishes but at least one rule failed.

mod prompt;

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use cdr_agent::eval::synthetic::{gen_synthetic, load_templates, paraphrase, FeatureTable};
use cdr_agent::eval::{load_dataset, run_eval, write_dataset, EvalConfig, EvalMode};
use cdr_agent::registry::lint::{check_monotone, lint_definition};
use cdr_agent::{
    EmbeddingProvider, LlmProvider, MockEmbedder, MockLlm, NoteMeta, Overrides, Pipeline,
    PipelineConfig, Registry, RemoteEmbedder, RemoteLlm, SessionStatus,
};
use cdr_agent_service::{serve, shutdown_signal, AppState, SessionStore};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cdr-agent", version, about = "Select, extract and execute clinical decision rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Analyze one note and print the session as JSON.
    Analyze(AnalyzeArgs),
    /// Load a registry and report validation and lint findings.
    Validate(ValidateArgs),
    /// Score the agent or the baseline on a labelled dataset.
    Eval(EvalArgs),
    /// Render labelled notes from a feature table and sentence templates.
    GenSynthetic(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    /// Offline hashing embedder and fixture or keyword model.
    Mock,
    /// Endpoints from CDR_AGENT_{EMBED,LLM}_{URL,MODEL} and CDR_AGENT_API_KEY.
    Remote,
}

#[derive(Args)]
struct ProviderArgs {
    /// Directory of rule definitions; repeat to combine several.
    #[arg(long = "registry", required = true)]
    registry: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "mock")]
    provider: ProviderKind,
    /// JSON object of mock model answers keyed `<note sha256>/<cdr id>`.
    #[arg(long)]
    llm_fixtures: Option<PathBuf>,
}

#[derive(Args)]
struct SelectionArgs {
    /// Significance level of the anomaly test.
    #[arg(long)]
    alpha: Option<f64>,
    /// Random truncations per note.
    #[arg(long)]
    truncations: Option<usize>,
    /// Fraction of the note kept by each truncation.
    #[arg(long)]
    retention: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Add rule keywords to the text embedded for each rule.
    #[arg(long)]
    keywords: bool,
}

impl SelectionArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            alpha: self.alpha,
            num_truncations: self.truncations,
            retention_ratio: self.retention,
            rng_seed: self.seed,
            include_keywords: self.keywords.then_some(true),
            interactive: None,
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    providers: ProviderArgs,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Port to listen on; 0 picks a free one.
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Idle seconds before a session is dropped.
    #[arg(long, default_value_t = 3600)]
    ttl: u64,
    /// Append-only session journal, replayed on start.
    #[arg(long)]
    journal: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Note text file.
    #[arg(long)]
    note: PathBuf,
    /// JSON file with patient_age_years and patient_sex.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[command(flatten)]
    providers: ProviderArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Ask for undetermined variables on the terminal instead of imputing.
    #[arg(long)]
    interactive: bool,
    /// Write the session here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long = "registry", required = true)]
    registry: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON-lines labelled notes.
    #[arg(long)]
    dataset: PathBuf,
    #[command(flatten)]
    providers: ProviderArgs,
    #[arg(long, value_enum, default_value = "agent")]
    mode: ModeArg,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    selection: SelectionArgs,
    /// Notes evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Agent,
    Baseline,
}

#[derive(Args)]
struct GenArgs {
    /// CSV feature table.
    #[arg(long)]
    tabular: PathBuf,
    /// JSON map of feature to value to sentence.
    #[arg(long)]
    templates: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0.2)]
    positive_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Rewrite each note with the model.
    #[arg(long)]
    paraphrase: bool,
    #[arg(long, value_enum, default_value = "mock")]
    provider: ProviderKind,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default_level)),
        )
        .init();
    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runtime.block_on(run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

async fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Serve(a) => cmd_serve(a).await,
        Command::Analyze(a) => cmd_analyze(a).await,
        Command::Validate(a) => cmd_validate(a),
        Command::Eval(a) => cmd_eval(a).await,
        Command::GenSynthetic(a) => cmd_gen(a).await,
    }
}

fn load_registry(dirs: &[PathBuf]) -> Result<Registry> {
    Registry::load_dirs(dirs).context("loading registry")
}

fn llm(kind: ProviderKind, fixtures: Option<&Path>) -> Result<Arc<dyn LlmProvider>> {
    Ok(match (kind, fixtures) {
        (ProviderKind::Mock, None) => Arc::new(MockLlm::new()),
        (ProviderKind::Mock, Some(path)) => Arc::new(MockLlm::from_file(path)?),
        (ProviderKind::Remote, None) => Arc::new(RemoteLlm::from_env()?),
        (ProviderKind::Remote, Some(_)) => bail!("--llm-fixtures only applies to the mock provider"),
    })
}

fn build_pipeline(p: &ProviderArgs, config: PipelineConfig) -> Result<Pipeline> {
    let registry = load_registry(&p.registry)?;
    let embedder: Arc<dyn EmbeddingProvider> = match p.provider {
        ProviderKind::Mock => Arc::new(MockEmbedder::default()),
        ProviderKind::Remote => Arc::new(RemoteEmbedder::from_env()?),
    };
    let llm = llm(p.provider, p.llm_fixtures.as_deref())?;
    Ok(Pipeline::new(Arc::new(registry), embedder, llm, config)?)
}

async fn cmd_serve(a: ServeArgs) -> Result<ExitCode> {
    let pipeline = build_pipeline(&a.providers, PipelineConfig::default())?;
    let ttl = Duration::from_secs(a.ttl);
    let store = match &a.journal {
        Some(path) => SessionStore::with_journal(ttl, path)?,
        None => SessionStore::new(ttl),
    };
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad listen address {}:{}", a.host, a.port))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    let local = listener.local_addr()?;
    tracing::info!(cdrs = pipeline.registry().len(), "registry loaded");
    println!("listening on http://{local}");
    std::io::stdout().flush()?;
    let state = AppState::new(Arc::new(pipeline), Arc::new(store));
    let sweep = (ttl / 4).clamp(Duration::from_secs(1), Duration::from_secs(60));
    serve(listener, state, sweep, shutdown_signal()).await?;
    Ok(ExitCode::SUCCESS)
}

async fn cmd_analyze(a: AnalyzeArgs) -> Result<ExitCode> {
    let note = std::fs::read_to_string(&a.note)
        .with_context(|| format!("reading {}", a.note.display()))?;
    let meta: NoteMeta = match &a.meta {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => NoteMeta::default(),
    };
    let mut overrides = a.selection.overrides();
    overrides.interactive = Some(a.interactive);
    let config = PipelineConfig::default().apply(&overrides)?;
    let pipeline = build_pipeline(&a.providers, config)?;
    let mut session = pipeline.analyze(&note, &meta).await?;

    if session.status == SessionStatus::AwaitingInput {
        let stdin = std::io::stdin();
        let mut input = stdin.lock();
        let mut stderr = std::io::stderr();
        prompt::resolve_all(&pipeline, &mut session, &mut input, &mut stderr)?;
    }

    let text = serde_json::to_string_pretty(&session)? + "\n";
    match &a.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    eprint!("{}", prompt::summary(&session));
    Ok(if session.status == SessionStatus::Error {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    })
}

fn cmd_validate(a: ValidateArgs) -> Result<ExitCode> {
    let registry = load_registry(&a.registry)?;
    let mut out = std::io::stdout().lock();
    for def in registry.definitions() {
        writeln!(out, "{}: {} variables", def.id, def.variables.len())?;
        for w in lint_definition(def) {
            writeln!(out, "  warning {}: {}", w.code, w.message)?;
        }
        let report = check_monotone(def)?;
        if let Some((assignment, flipped)) = &report.counterexample {
            writeln!(
                out,
                "  warning NON_MONOTONE: setting `{flipped}` to true removes a positive outcome at {}",
                serde_json::to_string(assignment)?
            )?;
        }
    }
    writeln!(out, "{} rules, digest {}", registry.len(), registry.source_digest())?;
    Ok(ExitCode::SUCCESS)
}

async fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let dataset = load_dataset(&a.dataset)?;
    let config = PipelineConfig::default().apply(&a.selection.overrides())?;
    let pipeline = build_pipeline(&a.providers, config)?;
    if a.parallel == 0 {
        bail!("--parallel must be at least 1");
    }
    let mode = match a.mode {
        ModeArg::Agent => EvalMode::Agent,
        ModeArg::Baseline => EvalMode::Baseline,
    };
    let report = run_eval(
        &dataset,
        &pipeline,
        mode,
        &EvalConfig {
            note_parallelism: a.parallel,
        },
    )
    .await?;
    std::fs::write(&a.out, report.to_json_pretty()?).with_context(|| format!("writing {}", a.out.display()))?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
    eprintln!(
        "{} notes, {} failures: EA {:.3}, F1 {:.3}, sensitivity {}, specificity {}",
        report.notes,
        report.failures,
        report.ea_accuracy,
        report.f1,
        fmt(report.sensitivity),
        fmt(report.specificity)
    );
    Ok(ExitCode::SUCCESS)
}

async fn cmd_gen(a: GenArgs) -> Result<ExitCode> {
    let table = FeatureTable::load(&a.tabular)?;
    let templates = load_templates(&a.templates)?;
    let mut notes = gen_synthetic(&table, &templates, a.n, a.positive_fraction, a.seed)?;
    if a.paraphrase {
        let model = llm(a.provider, None)?;
        paraphrase(&mut notes, model.as_ref()).await?;
    }
    write_dataset(&a.out, &notes)?;
    eprintln!("wrote {} notes to {}", notes.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}
