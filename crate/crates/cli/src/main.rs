use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use gridscribe_core::agent::{run_agent_with_sink, AgentDeps, AgentEvent, RunStatus};
use gridscribe_core::config::{parse_executor_kind, GridscribeConfig, Runtime};
use gridscribe_core::corpus::CorpusManifest;
use gridscribe_core::executor::list_backends;
use gridscribe_core::mcp::{McpServer, ResultPacket, WorkerCommand, DEFAULT_WORKER_LIMIT, DEFAULT_WORKER_TIMEOUT_MS};
use gridscribe_core::metrics::{
    load_tasks, render_table, run_benchmark, write_reports, BenchMatrix, BenchOptions, FileSessionFactory,
};
use gridscribe_core::planner::{KnowledgeStores, RetrievalMode};
use gridscribe_core::precheck::ConventionCatalog;
use gridscribe_core::prompt::bundled_fewshots;
use gridscribe_core::vector::HashingEmbedder;

#[derive(Parser)]
#[command(
    name = "gridscribe",
    version,
    about = "Natural-language requests to MATPOWER scripts"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the agent on one request and print the result as JSON.
    Run {
        #[arg(long)]
        request: String,
        #[arg(long)]
        rag_mode: Option<RetrievalMode>,
        /// mock or octave
        #[arg(long, default_value = "mock")]
        backend: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Stream agent events to stderr as JSON lines.
        #[arg(long)]
        events: bool,
        /// Append the sentinel result line to stdout.
        #[arg(long)]
        emit_result: bool,
    },
    /// Run the task suite over a configuration matrix.
    Bench {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Supplies the index and Octave settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Build retrieval stores from a corpus manifest.
    Index {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the MCP tool over stdio.
    Mcp {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        worker_limit: Option<usize>,
        #[arg(long)]
        worker_timeout_ms: Option<u64>,
    },
    /// Serve the HTTP/SSE gateway.
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// List available execution backends.
    Backends {
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<GridscribeConfig> {
    match path {
        Some(p) => Ok(GridscribeConfig::load(p)?),
        None => Ok(GridscribeConfig::default()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run_once(
    request: &str,
    rag_mode: Option<RetrievalMode>,
    backend: &str,
    config: Option<&PathBuf>,
    events: bool,
) -> Result<gridscribe_core::AgentResult> {
    let cfg = load_config(config)?;
    let kind = parse_executor_kind(backend)?;
    let runtime = Runtime::new(cfg)?;
    let mut agent_config = runtime.config.agent_config();
    if let Some(mode) = rag_mode {
        agent_config.rag_mode = mode;
    }
    let llm = runtime.llm()?;
    let executor = runtime.executor(kind)?;
    let deps = AgentDeps {
        llm: llm.as_ref(),
        validator_llm: None,
        stores: &runtime.stores,
        executor: executor.as_ref(),
        catalog: ConventionCatalog::bundled(),
        fewshots: bundled_fewshots(),
    };
    let mut sink = |e: &AgentEvent| {
        if events {
            let mut err = std::io::stderr().lock();
            let _ = serde_json::to_writer(&mut err, e);
            let _ = writeln!(err);
        }
    };
    Ok(run_agent_with_sink(request, &agent_config, &deps, &mut sink)?)
}

fn cmd_run(
    request: String,
    rag_mode: Option<RetrievalMode>,
    backend: String,
    config: Option<PathBuf>,
    events: bool,
    emit_result: bool,
) -> Result<ExitCode> {
    match run_once(&request, rag_mode, &backend, config.as_ref(), events) {
        Ok(result) => {
            print_json(&result)?;
            if emit_result {
                println!("{}", ResultPacket::from_result(&result).sentinel_line());
            }
            Ok(if result.status == RunStatus::Success {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Err(e) if emit_result => {
            eprintln!("error: {e:#}");
            let packet = ResultPacket {
                final_code: String::new(),
                status: "failure".into(),
                iterations: 0,
                debug_log: vec![],
                warnings: vec![],
                last_error: Some(format!("{e:#}")),
            };
            println!("{}", packet.sentinel_line());
            Ok(ExitCode::FAILURE)
        }
        Err(e) => Err(e),
    }
}

fn cmd_bench(
    tasks: PathBuf,
    matrix: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    parallel: usize,
) -> Result<ExitCode> {
    let tasks = load_tasks(&tasks)?;
    let matrix = BenchMatrix::load(&matrix)?;
    let cfg = load_config(config.as_ref())?;
    let factory = FileSessionFactory {
        settings: cfg.executor_settings(),
    };
    let runtime = Runtime::new(cfg)?;
    let summaries = run_benchmark(&tasks, &matrix, &runtime.stores, &factory, BenchOptions { parallel });
    write_reports(&out, &summaries)?;
    print!("{}", render_table(&summaries));
    Ok(ExitCode::SUCCESS)
}

fn cmd_index(manifest: PathBuf, out: PathBuf) -> Result<ExitCode> {
    let corpus = CorpusManifest::load(&manifest)
        .and_then(|m| m.load_corpus())
        .with_context(|| format!("loading {}", manifest.display()))?;
    let stores = KnowledgeStores::from_corpus(&corpus, Arc::new(HashingEmbedder::default()))?;
    stores.persist(&out)?;
    println!(
        "{}",
        serde_json::json!({
            "out": out.display().to_string(),
            "pdf_chunks": stores.pdf.as_ref().map_or(0, |i| i.len()),
            "enhanced_chunks": stores.enhanced.as_ref().map_or(0, |i| i.len()),
            "sections": stores.sections.as_ref().map_or(0, |s| s.sections.len()),
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_mcp(config: Option<PathBuf>, worker_limit: Option<usize>, worker_timeout_ms: Option<u64>) -> Result<ExitCode> {
    let cfg = load_config(config.as_ref())?;
    let mut worker = WorkerCommand::new(std::env::current_exe().context("locating own executable")?);
    if let Some(p) = &config {
        worker.suffix = vec!["--config".into(), std::path::absolute(p)?.display().to_string()];
    }
    let limit = worker_limit.or(cfg.mcp_worker_limit).unwrap_or(DEFAULT_WORKER_LIMIT);
    let timeout = worker_timeout_ms
        .or(cfg.worker_timeout_ms)
        .unwrap_or(DEFAULT_WORKER_TIMEOUT_MS);
    if limit == 0 {
        bail!("worker limit must be at least 1");
    }
    let server = Arc::new(McpServer::new(worker, limit, Duration::from_millis(timeout)));
    tokio::runtime::Runtime::new()?.block_on(gridscribe_core::mcp::serve_stdio(server))?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(port: u16, config: Option<PathBuf>) -> Result<ExitCode> {
    let runtime = Arc::new(Runtime::new(load_config(config.as_ref())?)?);
    tokio::runtime::Runtime::new()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
        eprintln!("gateway listening on http://{}", listener.local_addr()?);
        gridscribe_core::gateway::serve_gateway(listener, runtime).await
    })?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Cmd::Run {
            request,
            rag_mode,
            backend,
            config,
            events,
            emit_result,
        } => cmd_run(request, rag_mode, backend, config, events, emit_result),
        Cmd::Bench {
            tasks,
            matrix,
            out,
            config,
            parallel,
        } => cmd_bench(tasks, matrix, out, config, parallel),
        Cmd::Index { manifest, out } => cmd_index(manifest, out),
        Cmd::Mcp {
            config,
            worker_limit,
            worker_timeout_ms,
        } => cmd_mcp(config, worker_limit, worker_timeout_ms),
        Cmd::Serve { port, config } => cmd_serve(port, config),
        Cmd::Backends { config } => load_config(config.as_ref())
            .and_then(|c| print_json(&list_backends(&c.executor_settings())))
            .map(|_| ExitCode::SUCCESS),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
