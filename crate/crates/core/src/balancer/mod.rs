//! One-in-flight load balancer.
//!
//! Speaks the model server protocol on its own port and fans evaluation
//! requests out over a pool of backend servers, never sending a backend more
//! than one evaluation at a time. Requests that find no idle backend wait in
//! a FIFO queue. Backends are probed with `GET /Info`; a backend that fails a
//! request is taken out of rotation and the request is re-sent elsewhere.
//!
//! Metadata endpoints (`/Info`, `/InputSizes`, `/OutputSizes`, `/ModelInfo`)
//! are proxied to the first healthy backend and do not occupy a slot.

mod pool;

pub use pool::{
    Admission, BackendPool, BackendStats, LatencyHistogram, PoolEvent, PoolStats, LATENCY_BOUNDS_MS,
};

use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::path::Path;
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use serde::Deserialize;
use tokio::sync::oneshot;

use crate::protocol::{
    InfoResponse, InputSizesResponse, ModelInfoRequest, ModelInfoResponse, OperationKind,
    OutputSizesResponse, ProtocolError, SizesRequest, Support,
};

#[derive(Debug, Clone)]
pub struct BalancerConfig {
    pub host: IpAddr,
    pub listen_port: u16,
    pub backend_urls: Vec<String>,
    pub retry_on_failure: bool,
    /// Defaults to the pool size.
    pub max_retries_per_request: Option<usize>,
    pub health_interval: Duration,
    pub probe_timeout: Duration,
    /// Consecutive failed probes before a backend leaves rotation.
    pub unhealthy_after: u32,
    pub queue_capacity: usize,
    /// Keep a dispatch/health log, see [`BalancerHandle::events`].
    pub record_events: bool,
    pub body_limit: usize,
    pub worker_threads: usize,
}

impl BalancerConfig {
    pub fn new(backend_urls: Vec<String>) -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            listen_port: crate::protocol::DEFAULT_PORT,
            backend_urls,
            retry_on_failure: true,
            max_retries_per_request: None,
            health_interval: Duration::from_secs(5),
            probe_timeout: Duration::from_secs(2),
            unhealthy_after: 2,
            queue_capacity: 10_000,
            record_events: false,
            body_limit: 64 * 1024 * 1024,
            worker_threads: 4,
        }
    }

    /// Loopback listener on an OS-assigned port.
    pub fn local(backend_urls: Vec<String>) -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            listen_port: 0,
            ..Self::new(backend_urls)
        }
    }

    pub fn max_retries(&self) -> usize {
        self.max_retries_per_request.unwrap_or(self.backend_urls.len())
    }

    fn check(&self) -> Result<(), BalanceError> {
        if self.backend_urls.is_empty() {
            return Err(BalanceError::Config("backend list is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for url in &self.backend_urls {
            if !seen.insert(url.trim_end_matches('/')) {
                return Err(BalanceError::Config(format!("duplicate backend {url}")));
            }
        }
        if self.queue_capacity == 0 {
            return Err(BalanceError::Config("queue capacity must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct BackendFile {
    backends: Vec<String>,
}

/// Reads a backend list file of the form `{"backends": ["http://...", ...]}`.
pub fn backends_from_file(path: &Path) -> Result<Vec<String>, BalanceError> {
    let raw = std::fs::read(path)
        .map_err(|e| BalanceError::Config(format!("cannot read {}: {e}", path.display())))?;
    let file: BackendFile = serde_json::from_slice(&raw)
        .map_err(|e| BalanceError::Config(format!("invalid backend file {}: {e}", path.display())))?;
    Ok(file.backends)
}

#[derive(Debug, thiserror::Error)]
pub enum BalanceError {
    #[error("invalid balancer configuration: {0}")]
    Config(String),
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to start runtime: {0}")]
    Runtime(#[source] std::io::Error),
    #[error("backends serve different models: {0}")]
    InconsistentBackends(String),
}

#[derive(Clone)]
struct Ctx {
    pool: Arc<Mutex<BackendPool>>,
    http: reqwest::Client,
    retry: bool,
    max_retries: usize,
    body_limit: usize,
}

type Relayed = (StatusCode, Bytes);

fn relay((status, body): Relayed) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error(e: ProtocolError) -> Relayed {
    let status = StatusCode::from_u16(e.kind.http_status()).unwrap_or(StatusCode::BAD_GATEWAY);
    (status, Bytes::from(e.to_json()))
}

async fn forward(http: &reqwest::Client, url: &str, path: &str, method: Method, body: Bytes) -> Result<Relayed, String> {
    let target = format!("{url}{path}");
    let req = if method == Method::GET {
        http.get(target)
    } else {
        http.post(target)
            .header(header::CONTENT_TYPE, "application/json")
            .body(body)
    };
    let resp = req.send().await.map_err(|e| e.to_string())?;
    let status = StatusCode::from_u16(resp.status().as_u16()).map_err(|e| e.to_string())?;
    let body = resp.bytes().await.map_err(|e| e.to_string())?;
    Ok((status, body))
}

/// Full life of one evaluation request: wait for a backend, forward, retry
/// elsewhere on backend failure. Runs detached from the client connection
/// so a vanished client can never leave a backend marked busy.
async fn evaluation(ctx: Ctx, path: &'static str, body: Bytes, mut admission: Admission, started: Instant) -> Relayed {
    let mut failures = 0usize;
    loop {
        let backend = match admission {
            Admission::Rejected => {
                return error(ProtocolError::unavailable("balancer queue is full"));
            }
            Admission::Dispatched(i) => i,
            Admission::Queued(rx) => match rx.await {
                Ok(i) => i,
                Err(_) => {
                    ctx.pool.lock().unwrap().respond_unqueued(started.elapsed());
                    return error(ProtocolError::unavailable("balancer is shutting down"));
                }
            },
        };
        let url = ctx.pool.lock().unwrap().url(backend).to_string();
        let outcome = forward(&ctx.http, &url, path, Method::POST, body.clone()).await;
        let reason = match outcome {
            Ok(relayed) if relayed.0 != StatusCode::SERVICE_UNAVAILABLE => {
                ctx.pool.lock().unwrap().complete(backend, started.elapsed());
                return relayed;
            }
            Ok((status, _)) => format!("HTTP {status}"),
            Err(e) => e,
        };
        tracing::warn!(backend = %url, "backend failed: {reason}");
        failures += 1;
        let retry = ctx.retry && failures <= ctx.max_retries;
        match ctx.pool.lock().unwrap().fail(backend, retry, started.elapsed()) {
            Some(next) => admission = next,
            None => {
                return error(ProtocolError::unavailable(format!(
                    "backend {url} failed after {failures} attempt(s): {reason}"
                )))
            }
        }
    }
}

async fn handle(State(ctx): State<Ctx>, method: Method, uri: Uri, body: Body) -> Response {
    let path = uri.path();
    if method == Method::GET && path == "/stats" {
        let stats = ctx.pool.lock().unwrap().stats();
        return relay((
            StatusCode::OK,
            Bytes::from(serde_json::to_vec(&stats).expect("stats serialize")),
        ));
    }
    let body = match axum::body::to_bytes(body, ctx.body_limit).await {
        Ok(b) => b,
        Err(e) => return relay(error(ProtocolError::malformed(format!("could not read body: {e}")))),
    };
    let op = OperationKind::from_path(path).filter(|_| method == Method::POST);
    if let Some(op) = op {
        let started = Instant::now();
        let admission = ctx.pool.lock().unwrap().admit();
        let task = tokio::spawn(evaluation(ctx.clone(), op.path(), body, admission, started));
        return match task.await {
            Ok(relayed) => relay(relayed),
            Err(e) => relay(error(ProtocolError::unavailable(format!("dispatch task failed: {e}")))),
        };
    }
    let known = match path {
        "/Info" => method == Method::GET,
        "/InputSizes" | "/OutputSizes" | "/ModelInfo" => method == Method::POST,
        _ => false,
    };
    if !known {
        return relay(error(ProtocolError::malformed("no such endpoint")));
    }
    let healthy = ctx.pool.lock().unwrap().healthy_backends();
    for i in healthy {
        let url = ctx.pool.lock().unwrap().url(i).to_string();
        match forward(&ctx.http, &url, path, method.clone(), body.clone()).await {
            Ok(r) => return relay(r),
            Err(e) => tracing::debug!(backend = %url, "metadata request failed: {e}"),
        }
    }
    relay(error(ProtocolError::unavailable("no healthy backend")))
}

async fn probe(http: &reqwest::Client, url: &str, timeout: Duration) -> bool {
    match http.get(format!("{url}/Info")).timeout(timeout).send().await {
        Ok(resp) => resp.status().is_success(),
        Err(_) => false,
    }
}

async fn health_loop(ctx: Ctx, interval: Duration, timeout: Duration) {
    let mut ticker = tokio::time::interval(interval);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    ticker.tick().await;
    loop {
        ticker.tick().await;
        let urls: Vec<String> = {
            let pool = ctx.pool.lock().unwrap();
            (0..pool.len()).map(|i| pool.url(i).to_string()).collect()
        };
        let probes: Vec<_> = urls
            .into_iter()
            .enumerate()
            .map(|(i, url)| {
                let ctx = ctx.clone();
                tokio::spawn(async move {
                    let ok = probe(&ctx.http, &url, timeout).await;
                    ctx.pool.lock().unwrap().probe_result(i, ok);
                })
            })
            .collect();
        for p in probes {
            let _ = p.await;
        }
    }
}

type Signature = Vec<(String, Vec<usize>, Vec<usize>, Support)>;

async fn post_json<T: serde::de::DeserializeOwned>(
    http: &reqwest::Client,
    url: &str,
    path: &str,
    body: Vec<u8>,
    timeout: Duration,
) -> Result<T, String> {
    let resp = http
        .post(format!("{url}{path}"))
        .header(header::CONTENT_TYPE, "application/json")
        .body(body)
        .timeout(timeout)
        .send()
        .await
        .map_err(|e| e.to_string())?;
    let bytes = resp.bytes().await.map_err(|e| e.to_string())?;
    serde_json::from_slice(&bytes).map_err(|e| e.to_string())
}

async fn signature(http: &reqwest::Client, url: &str, timeout: Duration) -> Result<Signature, String> {
    let resp = http
        .get(format!("{url}/Info"))
        .timeout(timeout)
        .send()
        .await
        .map_err(|e| e.to_string())?;
    let info: InfoResponse = serde_json::from_slice(&resp.bytes().await.map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut sig = Vec::new();
    for name in info.models {
        let sizes = serde_json::to_vec(&SizesRequest {
            name: name.clone(),
            config: Default::default(),
        })
        .expect("serializes");
        let inputs: InputSizesResponse = post_json(http, url, "/InputSizes", sizes.clone(), timeout).await?;
        let outputs: OutputSizesResponse = post_json(http, url, "/OutputSizes", sizes, timeout).await?;
        let info_req = serde_json::to_vec(&ModelInfoRequest { name: name.clone() }).expect("serializes");
        let support: ModelInfoResponse = post_json(http, url, "/ModelInfo", info_req, timeout).await?;
        sig.push((name, inputs.input_sizes, outputs.output_sizes, support.support));
    }
    sig.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(sig)
}

/// Probes every backend once. Unreachable backends start unhealthy; reachable
/// ones must all serve identical model descriptors.
async fn startup_check(ctx: &Ctx, urls: &[String], timeout: Duration) -> Result<(), BalanceError> {
    let mut reference: Option<(String, Signature)> = None;
    for (i, url) in urls.iter().enumerate() {
        match signature(&ctx.http, url, timeout).await {
            Ok(sig) => match &reference {
                None => reference = Some((url.clone(), sig)),
                Some((first, expected)) if *expected != sig => {
                    return Err(BalanceError::InconsistentBackends(format!(
                        "{url} differs from {first}"
                    )));
                }
                Some(_) => {}
            },
            Err(e) => {
                tracing::warn!(backend = %url, "backend unreachable at startup: {e}");
                ctx.pool.lock().unwrap().mark_health(i, false);
            }
        }
    }
    Ok(())
}

struct Running {
    stop: oneshot::Sender<()>,
    thread: JoinHandle<()>,
}

/// A running balancer. Dropping the handle shuts it down.
pub struct BalancerHandle {
    addr: SocketAddr,
    pool: Arc<Mutex<BackendPool>>,
    running: Mutex<Option<Running>>,
}

impl BalancerHandle {
    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    pub fn url(&self) -> String {
        let ip = if self.addr.ip().is_unspecified() {
            IpAddr::V4(Ipv4Addr::LOCALHOST)
        } else {
            self.addr.ip()
        };
        format!("http://{}", SocketAddr::new(ip, self.addr.port()))
    }

    pub fn stats(&self) -> PoolStats {
        self.pool.lock().unwrap().stats()
    }

    /// Dispatch and health log; empty unless `record_events` was set.
    pub fn events(&self) -> Vec<PoolEvent> {
        self.pool.lock().unwrap().events()
    }

    /// Time since startup, comparable with [`PoolEvent::at`].
    pub fn elapsed(&self) -> Duration {
        self.pool.lock().unwrap().elapsed()
    }

    /// Overrides the health of a backend until the next probe decides otherwise.
    pub fn mark_health(&self, backend: usize, healthy: bool) {
        self.pool.lock().unwrap().mark_health(backend, healthy);
    }

    /// Rejects queued requests, waits for in-flight ones and closes the
    /// listener. Idempotent.
    pub fn shutdown(&self) {
        let Some(running) = self.running.lock().unwrap().take() else {
            return;
        };
        self.pool.lock().unwrap().close();
        let _ = running.stop.send(());
        if running.thread.join().is_err() {
            tracing::warn!("balancer thread panicked during shutdown");
        }
    }
}

impl Drop for BalancerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn run_balancer(cfg: BalancerConfig) -> Result<BalancerHandle, BalanceError> {
    cfg.check()?;
    let urls: Vec<String> = cfg
        .backend_urls
        .iter()
        .map(|u| u.trim_end_matches('/').to_string())
        .collect();
    let addr = SocketAddr::new(cfg.host, cfg.listen_port);
    let listener = TcpListener::bind(addr).map_err(|source| BalanceError::Bind { addr, source })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| BalanceError::Bind { addr, source })?;
    let local = listener
        .local_addr()
        .map_err(|source| BalanceError::Bind { addr, source })?;

    let mut pool = BackendPool::new(urls.clone(), cfg.queue_capacity, cfg.unhealthy_after);
    if cfg.record_events {
        pool.record_events();
    }
    let pool = Arc::new(Mutex::new(pool));
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(cfg.worker_threads.max(1))
        .thread_name("balancer")
        .enable_all()
        .build()
        .map_err(BalanceError::Runtime)?;
    let http = reqwest::Client::builder()
        .build()
        .map_err(|e| BalanceError::Runtime(std::io::Error::other(e)))?;
    let ctx = Ctx {
        pool: Arc::clone(&pool),
        http,
        retry: cfg.retry_on_failure,
        max_retries: cfg.max_retries(),
        body_limit: cfg.body_limit,
    };

    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let (ready_tx, ready_rx) = mpsc::channel::<Result<(), BalanceError>>();
    let thread = std::thread::Builder::new()
        .name(format!("balancer-{}", local.port()))
        .spawn(move || {
            runtime.block_on(async move {
                if let Err(e) = startup_check(&ctx, &urls, cfg.probe_timeout).await {
                    let _ = ready_tx.send(Err(e));
                    return;
                }
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(source) => {
                        let _ = ready_tx.send(Err(BalanceError::Bind { addr, source }));
                        return;
                    }
                };
                tokio::spawn(health_loop(ctx.clone(), cfg.health_interval, cfg.probe_timeout));
                let app = Router::new()
                    .route("/stats", get(handle))
                    .fallback(handle)
                    .with_state(ctx);
                let _ = ready_tx.send(Ok(()));
                let served = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await;
                if let Err(e) = served {
                    tracing::warn!("balancer stopped with error: {e}");
                }
            });
        })
        .map_err(BalanceError::Runtime)?;
    match ready_rx.recv() {
        Ok(Ok(())) => {}
        Ok(Err(e)) => {
            let _ = thread.join();
            return Err(e);
        }
        Err(_) => {
            let _ = thread.join();
            return Err(BalanceError::Runtime(std::io::Error::other(
                "balancer thread exited early",
            )));
        }
    }
    Ok(BalancerHandle {
        addr: local,
        pool,
        running: Mutex::new(Some(Running {
            stop: stop_tx,
            thread,
        })),
    })
}
