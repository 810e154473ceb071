//! Weak-scaling benchmark: N backend processes behind the balancer, N client
//! workers each issuing K sequential requests.
//!
//! CSV columns: `scenario, backends, requests_per_worker, delay_ms,
//! makespan_s, ideal_s, efficiency, clamped, latency_p50_ms,
//! latency_p90_ms, latency_p99_ms, latency_max_ms, failed_requests,
//! status`. `efficiency = ideal_s / makespan_s`, capped at 1.05 with
//! `clamped = true`; it is empty when the ideal is zero or the step failed.

use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::sync::Barrier;
use std::time::{Duration, Instant};

use modelbridge::balancer::{run_balancer, BalancerConfig};
use modelbridge::{Config, RemoteModel};
use serde::Serialize;

use crate::error::CliError;

pub const EFFICIENCY_CAP: f64 = 1.05;

#[derive(clap::Args)]
pub struct BenchArgs {
    /// Backend counts to run, one step each; each step uses as many workers.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    backends_per_step: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    requests_per_worker: usize,
    /// Evaluation time of each backend model.
    #[arg(long, default_value_t = 250)]
    delay_ms: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "weak-scaling")]
    scenario: String,
}

#[derive(Debug, Serialize)]
struct BenchRow {
    scenario: String,
    backends: usize,
    requests_per_worker: usize,
    delay_ms: u64,
    makespan_s: Option<f64>,
    ideal_s: f64,
    efficiency: Option<f64>,
    clamped: bool,
    latency_p50_ms: Option<f64>,
    latency_p90_ms: Option<f64>,
    latency_p99_ms: Option<f64>,
    latency_max_ms: Option<f64>,
    failed_requests: usize,
    status: String,
}

/// A `serve` child process, killed on drop.
struct Backend {
    child: Child,
    port: u16,
}

impl Drop for Backend {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn spawn_backend(delay_ms: u64) -> Result<Backend, String> {
    let exe = std::env::current_exe().map_err(|e| format!("cannot locate own executable: {e}"))?;
    let mut child = Command::new(exe)
        .args(["serve", "--model", "delay", "--host", "127.0.0.1", "--port", "0", "--delay-ms"])
        .arg(delay_ms.to_string())
        .env_remove(modelbridge::server::PORT_ENV)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|e| format!("cannot spawn backend: {e}"))?;
    let stdout = child.stdout.take().expect("piped stdout");
    let mut line = String::new();
    let read = BufReader::new(stdout).read_line(&mut line);
    let port = line
        .trim()
        .strip_prefix("READY port=")
        .and_then(|p| p.parse::<u16>().ok());
    match (read, port) {
        (Ok(_), Some(port)) => Ok(Backend { child, port }),
        _ => {
            let _ = child.kill();
            let _ = child.wait();
            Err(format!("backend did not report readiness (got '{}')", line.trim()))
        }
    }
}

fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

fn step(n: usize, args: &BenchArgs) -> BenchRow {
    let ideal_s = args.requests_per_worker as f64 * args.delay_ms as f64 / 1000.0;
    let mut row = BenchRow {
        scenario: args.scenario.clone(),
        backends: n,
        requests_per_worker: args.requests_per_worker,
        delay_ms: args.delay_ms,
        makespan_s: None,
        ideal_s,
        efficiency: None,
        clamped: false,
        latency_p50_ms: None,
        latency_p90_ms: None,
        latency_p99_ms: None,
        latency_max_ms: None,
        failed_requests: 0,
        status: "ok".into(),
    };
    let backends: Result<Vec<Backend>, String> = (0..n).map(|_| spawn_backend(args.delay_ms)).collect();
    let backends = match backends {
        Ok(b) => b,
        Err(e) => {
            row.status = format!("spawn failed: {e}");
            return row;
        }
    };
    let urls = backends.iter().map(|b| format!("http://127.0.0.1:{}", b.port)).collect();
    let balancer = match run_balancer(BalancerConfig::local(urls)) {
        Ok(b) => b,
        Err(e) => {
            row.status = format!("balancer failed: {e}");
            return row;
        }
    };
    let model = match RemoteModel::connect(&balancer.url(), "forward") {
        Ok(m) => m,
        Err(e) => {
            row.status = format!("connect failed: {e}");
            return row;
        }
    };
    let barrier = Barrier::new(n + 1);
    let mut start = Instant::now();
    let per_worker: Vec<(Vec<Duration>, usize)> = std::thread::scope(|s| {
        let workers: Vec<_> = (0..n)
            .map(|w| {
                let (model, barrier) = (&model, &barrier);
                s.spawn(move || {
                    barrier.wait();
                    let mut latencies = Vec::with_capacity(args.requests_per_worker);
                    let mut failed = 0;
                    for k in 0..args.requests_per_worker {
                        let t = Instant::now();
                        let x = (w * args.requests_per_worker + k) as f64;
                        match model.evaluate(&[vec![x]], &Config::new()) {
                            Ok(out) if out == [vec![x]] => latencies.push(t.elapsed()),
                            _ => failed += 1,
                        }
                    }
                    (latencies, failed)
                })
            })
            .collect();
        start = Instant::now();
        barrier.wait();
        workers.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let makespan = start.elapsed().as_secs_f64();
    let mut latencies: Vec<f64> = per_worker
        .iter()
        .flat_map(|(l, _)| l.iter().map(|d| d.as_secs_f64() * 1000.0))
        .collect();
    latencies.sort_by(f64::total_cmp);
    row.failed_requests = per_worker.iter().map(|(_, f)| f).sum();
    row.makespan_s = Some(makespan);
    if ideal_s > 0.0 {
        let e = ideal_s / makespan;
        row.clamped = e > EFFICIENCY_CAP;
        row.efficiency = Some(e.min(EFFICIENCY_CAP));
    }
    row.latency_p50_ms = quantile(&latencies, 0.5);
    row.latency_p90_ms = quantile(&latencies, 0.9);
    row.latency_p99_ms = quantile(&latencies, 0.99);
    row.latency_max_ms = latencies.last().copied();
    if row.failed_requests > 0 {
        row.status = format!("{} requests failed", row.failed_requests);
    }
    drop(balancer);
    drop(backends);
    row
}

pub fn run(args: BenchArgs) -> Result<(), CliError> {
    if args.backends_per_step.is_empty() || args.backends_per_step.contains(&0) {
        return Err(CliError::Usage("--backends-per-step needs positive counts".into()));
    }
    if args.requests_per_worker == 0 {
        return Err(CliError::Usage("--requests-per-worker must be positive".into()));
    }
    let mut out = csv::Writer::from_path(&args.out)
        .map_err(|e| CliError::Resource(format!("cannot write {}: {e}", args.out.display())))?;
    let mut all_ok = true;
    for &n in &args.backends_per_step {
        let row = step(n, &args);
        println!(
            "backends={} makespan_s={} ideal_s={} efficiency={} status={}",
            row.backends,
            row.makespan_s.map_or("-".into(), |m| format!("{m:.3}")),
            row.ideal_s,
            row.efficiency.map_or("-".into(), |e| format!("{e:.3}")),
            row.status
        );
        all_ok &= row.status == "ok";
        out.serialize(&row)?;
        out.flush()?;
    }
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Failed("some benchmark steps failed, see the status column".into()))
    }
}
