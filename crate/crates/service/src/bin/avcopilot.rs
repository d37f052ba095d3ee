use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use avcopilot_core::assets;
use avcopilot_core::corpus::parse_corpus;
use avcopilot_core::eval::{
    run_scenario_eval, run_translation_eval, scenario_summary, translation_summary, write_scenario_report,
    write_translation_report, PromptContext,
};
use avcopilot_core::pipeline::{ScenarioSetup, Schedule};
use avcopilot_core::sim::Pacing;
use avcopilot_core::translator::Ablation;
use avcopilot_service::{build_pipeline, make_backend, serve, BackendKind, ServiceOptions};

#[derive(Parser)]
#[command(name = "avcopilot", version, about = "Natural-language co-pilot for an automated vehicle")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the live simulation behind the HTTP/WebSocket API.
    Serve(ServeArgs),
    /// Offline evaluations.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Stage-one backend: `rule` (offline) or `http` (needs the endpoint env var).
    #[arg(long, default_value = "rule")]
    backend: BackendKind,
    /// Route map file; the shipped map when omitted.
    #[arg(long)]
    map: Option<PathBuf>,
    /// Action registry file; the shipped registry when omitted.
    #[arg(long)]
    registry: Option<PathBuf>,
    #[arg(long, default_value = "baseline")]
    ablation: Ablation,
    /// Directory for per-session interaction logs.
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Exact-match translation accuracy and latency over a corpus.
    Translate {
        /// Corpus file; the shipped corpus when omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "rule")]
        backend: BackendKind,
        /// One configuration, or `all` for every ablation.
        #[arg(long, default_value = "baseline")]
        ablation: String,
        #[arg(long, default_value = "results/translate")]
        out: PathBuf,
    },
    /// Repeated scripted drives; task success rate and stage latencies.
    Scenario {
        #[arg(long, default_value_t = 30)]
        runs: usize,
        /// Schedule file; the shipped schedule when omitted.
        #[arg(long)]
        schedule: Option<PathBuf>,
        #[arg(long, default_value = "rule")]
        backend: BackendKind,
        #[arg(long, default_value = "results/scenario")]
        out: PathBuf,
    },
}

fn read_or(path: Option<&Path>, shipped: &str) -> anyhow::Result<String> {
    match path {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => Ok(shipped.to_string()),
    }
}

fn run_serve(args: ServeArgs) -> anyhow::Result<()> {
    let opts = ServiceOptions {
        map: read_or(args.map.as_deref(), assets::DEFAULT_MAP)?,
        registry: read_or(args.registry.as_deref(), assets::DEFAULT_REGISTRY)?,
        backend: make_backend(args.backend)?,
        ablation: args.ablation,
        log_dir: args.log_dir,
        pacing: Pacing::RealTime,
    };
    let pipeline = build_pipeline(opts)?;
    let addr: SocketAddr = format!("{}:{}", args.host, args.port).parse().context("bad listen address")?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
        tracing::info!(%addr, backend = pipeline.backend().name(), "serving");
        serve(listener, pipeline).await.context("server stopped")
    })
}

fn run_translate(corpus: Option<PathBuf>, backend: BackendKind, ablation: &str, out: &Path) -> anyhow::Result<()> {
    let corpus = parse_corpus(&read_or(corpus.as_deref(), assets::CORPUS)?).context("parsing corpus")?;
    let backend = make_backend(backend)?;
    let ablations: Vec<Ablation> = if ablation == "all" {
        Ablation::ALL.to_vec()
    } else {
        vec![ablation.parse().map_err(|e| anyhow::anyhow!("{e}"))?]
    };
    let context = PromptContext::shipped();
    for a in ablations {
        let eval = run_translation_eval(&corpus, backend.as_ref(), a, &context)?;
        let dir = out.join(a.as_str());
        write_translation_report(&eval, &dir)?;
        println!("{}", translation_summary(&eval));
        println!("written to {}\n", dir.display());
    }
    Ok(())
}

fn run_scenario(runs: usize, schedule: Option<PathBuf>, backend: BackendKind, out: &Path) -> anyhow::Result<()> {
    let schedule = Schedule::parse(&read_or(schedule.as_deref(), assets::SCHEDULE)?).context("parsing schedule")?;
    if schedule.is_empty() {
        bail!("schedule has no instructions");
    }
    let eval = run_scenario_eval(runs, &ScenarioSetup::shipped(), &schedule, make_backend(backend)?)?;
    write_scenario_report(&eval, out)?;
    println!("{}", scenario_summary(&eval));
    println!("written to {}", out.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    // Evaluations print a summary; per-instruction logging would bury it.
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();
    match cli.command {
        Command::Serve(args) => run_serve(args),
        Command::Eval(EvalCommand::Translate { corpus, backend, ablation, out }) => run_translate(corpus, backend, &ablation, &out),
        Command::Eval(EvalCommand::Scenario { runs, schedule, backend, out }) => run_scenario(runs, schedule, backend, &out),
    }
}

