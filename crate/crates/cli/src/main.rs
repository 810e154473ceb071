//! `modelbridge` command-line tool.
//!
//! Exit codes: 0 success, 1 the run itself failed (a model evaluation
//! error), 2 usage or configuration error, 3 resource error (port in use,
//! model unreachable, file I/O).

mod bench;
mod error;
mod uq;

use std::io::Write;
use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use modelbridge::balancer::{backends_from_file, run_balancer, BalanceError, BalancerConfig};
use modelbridge::models::{DelayModel, DoublingModel, LinearModel, MultiFidelityGaussianPosterior, SmoothForwardModel};
use modelbridge::server::{ServeError, PORT_ENV};
use modelbridge::{serve_models, Model, ServerConfig};

use error::CliError;

#[derive(Parser)]
#[command(name = "modelbridge", version, about = "Serve models over HTTP, balance them, and run UQ against them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve one model until interrupted. Prints `READY port=<p>` once listening.
    Serve(ServeArgs),
    /// Run the one-request-per-backend load balancer until interrupted.
    Balance(BalanceArgs),
    /// Weak-scaling benchmark through the balancer over spawned backends.
    BenchScaling(bench::BenchArgs),
    /// Forward and inverse UQ against a served model.
    #[command(subcommand)]
    Uq(uq::UqCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    /// `[[x]] -> [[2x]]`
    Doubling,
    /// Identity after a fixed wait (`--delay-ms`, overridable per request via config `delay_ms`).
    Delay,
    /// `[[x1, x2]] -> [[x1 + 2 x2, 3 x1 - x2]]` with all derivative operations.
    Linear,
    /// Multi-level 2-D log-posterior; config `level` picks the level.
    Posterior,
    /// Smooth 2-input response on the Froude/draft box.
    Smooth,
}

#[derive(clap::Args)]
struct ServeArgs {
    #[arg(long, value_enum)]
    model: ModelKind,
    /// Name the model is served under [default: "forward", "posterior" for the posterior model]
    #[arg(long)]
    name: Option<String>,
    #[arg(long, env = PORT_ENV, default_value_t = modelbridge::protocol::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    host: IpAddr,
    #[arg(long, default_value_t = 250)]
    delay_ms: u64,
    /// Input (and output) size of the delay model.
    #[arg(long, default_value_t = 1)]
    dim: usize,
    /// Evaluations of the model allowed to run at once; more wait in FIFO order.
    #[arg(long, default_value_t = 1)]
    max_concurrent: usize,
    /// Number of posterior levels.
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Perturbation amplitude of the coarsest posterior level.
    #[arg(long, default_value_t = 0.5)]
    bias: f64,
}

#[derive(clap::Args)]
struct BalanceArgs {
    /// Backend URLs, either a JSON file `{"backends": [...]}` or a comma-separated list.
    #[arg(long)]
    backends: String,
    #[arg(long, env = PORT_ENV, default_value_t = modelbridge::protocol::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    host: IpAddr,
    #[arg(long, default_value_t = 5000)]
    health_interval_ms: u64,
    #[arg(long, default_value_t = 10_000)]
    queue_capacity: usize,
    /// Report backend failures to the client instead of retrying elsewhere.
    #[arg(long)]
    no_retry: bool,
}

fn build_model(args: &ServeArgs) -> Result<Arc<dyn Model>, CliError> {
    let default_name = match args.model {
        ModelKind::Posterior => "posterior",
        _ => "forward",
    };
    let name = args.name.clone().unwrap_or_else(|| default_name.to_string());
    let usage = |e: modelbridge::ProtocolError| CliError::Usage(e.message);
    Ok(match args.model {
        ModelKind::Doubling => Arc::new(DoublingModel::new(name)),
        ModelKind::Delay => {
            if args.dim == 0 {
                return Err(CliError::Usage("--dim must be positive".into()));
            }
            Arc::new(DelayModel::new(name, args.dim, Duration::from_millis(args.delay_ms)))
        }
        ModelKind::Linear => Arc::new(LinearModel::new(name, vec![vec![1.0, 2.0], vec![3.0, -1.0]]).map_err(usage)?),
        ModelKind::Posterior => {
            Arc::new(MultiFidelityGaussianPosterior::standard(name, args.bias, args.levels).map_err(usage)?)
        }
        ModelKind::Smooth => {
            let (a, b) = SmoothForwardModel::DRAFT_RANGE;
            Arc::new(SmoothForwardModel::new(name, 0.5 * (a + b)))
        }
    })
}

/// Blocks until SIGINT or SIGTERM.
fn wait_for_signal() -> Result<(), CliError> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Resource(format!("cannot start signal handler: {e}")))?;
    rt.block_on(async {
        #[cfg(unix)]
        {
            let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())?;
            tokio::select! {
                r = tokio::signal::ctrl_c() => r,
                _ = term.recv() => Ok(()),
            }
        }
        #[cfg(not(unix))]
        tokio::signal::ctrl_c().await
    })
    .map_err(|e| CliError::Resource(format!("signal handler failed: {e}")))
}

fn ready(port: u16) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "READY port={port}");
    let _ = out.flush();
}

fn serve(args: ServeArgs) -> Result<(), CliError> {
    let model = build_model(&args)?;
    let cfg = ServerConfig {
        host: args.host,
        port: args.port,
        ..ServerConfig::default()
    }
    .with_max_concurrent(args.max_concurrent);
    let handle = serve_models(vec![model], cfg).map_err(|e| match e {
        ServeError::Config(_) => CliError::Usage(e.to_string()),
        _ => CliError::Resource(e.to_string()),
    })?;
    ready(handle.port());
    wait_for_signal()?;
    handle.shutdown();
    Ok(())
}

fn parse_backends(spec: &str) -> Result<Vec<String>, CliError> {
    let path = PathBuf::from(spec);
    if path.is_file() {
        return backends_from_file(&path).map_err(|e| CliError::Usage(e.to_string()));
    }
    Ok(spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect())
}

fn balance(args: BalanceArgs) -> Result<(), CliError> {
    let urls = parse_backends(&args.backends)?;
    let cfg = BalancerConfig {
        host: args.host,
        listen_port: args.port,
        health_interval: Duration::from_millis(args.health_interval_ms.max(1)),
        queue_capacity: args.queue_capacity,
        retry_on_failure: !args.no_retry,
        ..BalancerConfig::new(urls)
    };
    let handle = run_balancer(cfg).map_err(|e| match e {
        BalanceError::Config(_) | BalanceError::InconsistentBackends(_) => CliError::Usage(e.to_string()),
        _ => CliError::Resource(e.to_string()),
    })?;
    ready(handle.port());
    wait_for_signal()?;
    handle.shutdown();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Serve(args) => serve(args),
        Command::Balance(args) => balance(args),
        Command::BenchScaling(args) => bench::run(args),
        Command::Uq(cmd) => uq::run(cmd),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
