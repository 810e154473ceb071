//! HTTP model server.
//!
//! Hosts named [`Model`]s behind the JSON protocol. Each model has a FIFO
//! admission gate with `max_concurrent_per_model` slots (default 1), so a
//! compute-bound model never runs more evaluations than configured, while
//! metadata endpoints stay responsive during long evaluations.

use std::collections::HashSet;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;

use axum::body::{Body, Bytes};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::de::DeserializeOwned;
use serde::Serialize;
use tokio::sync::{oneshot, Semaphore};

use crate::model::{dispatch, Model};
use crate::protocol::{
    decode_request_as, encode_response, validate_against, validate_outputs, InfoResponse,
    InputSizesResponse, ModelInfoRequest, ModelInfoResponse, OperationKind, OutputSizesResponse,
    ProtocolError, SizesRequest, DEFAULT_PORT, PROTOCOL_VERSION,
};

/// Environment variable overriding the default listen port.
pub const PORT_ENV: &str = "BRIDGE_PORT";

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub host: IpAddr,
    /// 0 lets the OS pick a free port; see [`ServerHandle::port`].
    pub port: u16,
    pub max_concurrent_per_model: usize,
    /// Largest accepted request body in bytes.
    pub body_limit: usize,
    pub worker_threads: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::UNSPECIFIED),
            port: DEFAULT_PORT,
            max_concurrent_per_model: 1,
            body_limit: 64 * 1024 * 1024,
            worker_threads: 4,
        }
    }
}

impl ServerConfig {
    /// Default config with the port taken from `BRIDGE_PORT` when set.
    pub fn from_env() -> Result<Self, ServeError> {
        let mut cfg = Self::default();
        if let Ok(raw) = std::env::var(PORT_ENV) {
            cfg.port = raw
                .trim()
                .parse()
                .map_err(|_| ServeError::Config(format!("{PORT_ENV}={raw} is not a valid port")))?;
        }
        Ok(cfg)
    }

    /// Loopback-only config on an OS-assigned port.
    pub fn local() -> Self {
        Self {
            host: IpAddr::V4(Ipv4Addr::LOCALHOST),
            port: 0,
            ..Self::default()
        }
    }

    pub fn with_max_concurrent(mut self, n: usize) -> Self {
        self.max_concurrent_per_model = n;
        self
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("invalid server configuration: {0}")]
    Config(String),
    #[error("failed to bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to start runtime: {0}")]
    Runtime(#[source] std::io::Error),
}

struct Hosted {
    model: Arc<dyn Model>,
    gate: Arc<Semaphore>,
}

struct AppState {
    models: Vec<Hosted>,
    closing: AtomicBool,
}

impl AppState {
    fn find(&self, name: &str) -> Result<&Hosted, ProtocolError> {
        self.models
            .iter()
            .find(|h| h.model.name() == name)
            .ok_or_else(|| ProtocolError::unknown_model(name))
    }
}

struct ErrorResponse(ProtocolError);

impl From<ProtocolError> for ErrorResponse {
    fn from(e: ProtocolError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ErrorResponse {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.kind.http_status())
            .unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        json_response(status, self.0.to_json())
    }
}

fn json_response(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn ok_json<T: Serialize>(value: &T) -> Response {
    json_response(
        StatusCode::OK,
        serde_json::to_vec(value).expect("response serializes"),
    )
}

type Handled = Result<Response, ErrorResponse>;

async fn read_body(body: Body, limit: usize) -> Result<Bytes, ProtocolError> {
    axum::body::to_bytes(body, limit)
        .await
        .map_err(|e| ProtocolError::malformed(format!("could not read request body: {e}")))
}

fn parse<T: DeserializeOwned>(raw: &[u8]) -> Result<T, ProtocolError> {
    serde_json::from_slice(raw).map_err(|e| ProtocolError::malformed(format!("invalid body: {e}")))
}

#[derive(Clone)]
struct Ctx {
    state: Arc<AppState>,
    body_limit: usize,
}

async fn info(State(ctx): State<Ctx>) -> Response {
    ok_json(&InfoResponse {
        protocol_version: PROTOCOL_VERSION,
        models: ctx.state.models.iter().map(|h| h.model.name().to_string()).collect(),
    })
}

async fn input_sizes(State(ctx): State<Ctx>, body: Body) -> Handled {
    let req: SizesRequest = parse(&read_body(body, ctx.body_limit).await?)?;
    let hosted = ctx.state.find(&req.name)?;
    Ok(ok_json(&InputSizesResponse {
        input_sizes: hosted.model.input_sizes(&req.config),
    }))
}

async fn output_sizes(State(ctx): State<Ctx>, body: Body) -> Handled {
    let req: SizesRequest = parse(&read_body(body, ctx.body_limit).await?)?;
    let hosted = ctx.state.find(&req.name)?;
    Ok(ok_json(&OutputSizesResponse {
        output_sizes: hosted.model.output_sizes(&req.config),
    }))
}

async fn model_info(State(ctx): State<Ctx>, body: Body) -> Handled {
    let req: ModelInfoRequest = parse(&read_body(body, ctx.body_limit).await?)?;
    let hosted = ctx.state.find(&req.name)?;
    Ok(ok_json(&ModelInfoResponse {
        support: hosted.model.supports(),
    }))
}

async fn operation(ctx: Ctx, op: OperationKind, body: Body) -> Handled {
    let raw = read_body(body, ctx.body_limit).await?;
    let req = decode_request_as(op, &raw)?;
    let hosted = ctx.state.find(&req.model_name)?;
    let desc = hosted.model.descriptor(&req.config);
    validate_against(&req, &desc)?;

    let unavailable = || ProtocolError::unavailable("server is shutting down");
    if ctx.state.closing.load(Ordering::SeqCst) {
        return Err(unavailable().into());
    }
    // Semaphore waiters are served in FIFO order; closing it rejects the queue.
    let permit = Arc::clone(&hosted.gate)
        .acquire_owned()
        .await
        .map_err(|_| unavailable())?;

    let model = Arc::clone(&hosted.model);
    let joined = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let out = dispatch(model.as_ref(), &req)?;
        validate_outputs(&out, &desc.response_shape(&req.operation))?;
        Ok::<_, ProtocolError>(out)
    })
    .await;
    let outputs = match joined {
        Ok(result) => result?,
        Err(e) => {
            let msg = panic_message(e);
            tracing::warn!(model = %hosted.model.name(), "model evaluation panicked: {msg}");
            return Err(ProtocolError::model_failure(msg).into());
        }
    };
    Ok(json_response(StatusCode::OK, encode_response(op, &outputs)))
}

fn panic_message(e: tokio::task::JoinError) -> String {
    match e.try_into_panic() {
        Ok(payload) => payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "model panicked".to_string()),
        Err(e) => format!("evaluation task failed: {e}"),
    }
}

async fn not_found() -> ErrorResponse {
    ErrorResponse(ProtocolError::malformed("no such endpoint"))
}

fn router(ctx: Ctx) -> Router {
    let mut app = Router::new()
        .route("/Info", get(info))
        .route("/InputSizes", post(input_sizes))
        .route("/OutputSizes", post(output_sizes))
        .route("/ModelInfo", post(model_info));
    for op in OperationKind::ALL {
        app = app.route(
            op.path(),
            post(move |State(ctx): State<Ctx>, body: Body| operation(ctx, op, body)),
        );
    }
    app.fallback(not_found).with_state(ctx)
}

struct Running {
    stop: oneshot::Sender<()>,
    thread: JoinHandle<()>,
}

/// A running server. Dropping the handle shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    state: Arc<AppState>,
    running: Mutex<Option<Running>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Base URL reachable from this machine.
    pub fn url(&self) -> String {
        let ip = if self.addr.ip().is_unspecified() {
            IpAddr::V4(Ipv4Addr::LOCALHOST)
        } else {
            self.addr.ip()
        };
        format!("http://{}", SocketAddr::new(ip, self.addr.port()))
    }

    /// Stops accepting connections, rejects queued evaluations with
    /// `Unavailable`, lets running evaluations finish and waits for the
    /// listener to close. Idempotent.
    pub fn shutdown(&self) {
        let Some(running) = self.running.lock().unwrap().take() else {
            return;
        };
        self.state.closing.store(true, Ordering::SeqCst);
        for hosted in &self.state.models {
            hosted.gate.close();
        }
        let _ = running.stop.send(());
        if running.thread.join().is_err() {
            tracing::warn!("server thread panicked during shutdown");
        }
    }

    pub fn is_running(&self) -> bool {
        self.running.lock().unwrap().is_some()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Serves `models` until the returned handle is shut down.
///
/// Binding happens before this returns, so a busy port is reported here.
pub fn serve_models(models: Vec<Arc<dyn Model>>, cfg: ServerConfig) -> Result<ServerHandle, ServeError> {
    if models.is_empty() {
        return Err(ServeError::Config("no models to serve".into()));
    }
    if cfg.max_concurrent_per_model == 0 {
        return Err(ServeError::Config("max_concurrent_per_model must be at least 1".into()));
    }
    let mut seen = HashSet::new();
    for m in &models {
        if !seen.insert(m.name().to_string()) {
            return Err(ServeError::Config(format!("duplicate model name '{}'", m.name())));
        }
    }

    let addr = SocketAddr::new(cfg.host, cfg.port);
    let listener = TcpListener::bind(addr).map_err(|source| ServeError::Bind { addr, source })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| ServeError::Bind { addr, source })?;
    let local = listener
        .local_addr()
        .map_err(|source| ServeError::Bind { addr, source })?;

    let state = Arc::new(AppState {
        models: models
            .into_iter()
            .map(|model| Hosted {
                model,
                gate: Arc::new(Semaphore::new(cfg.max_concurrent_per_model)),
            })
            .collect(),
        closing: AtomicBool::new(false),
    });
    let app = router(Ctx {
        state: Arc::clone(&state),
        body_limit: cfg.body_limit,
    });

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(cfg.worker_threads.max(1))
        .thread_name("model-server")
        .enable_all()
        .build()
        .map_err(ServeError::Runtime)?;
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let (ready_tx, ready_rx) = mpsc::channel();
    let thread = std::thread::Builder::new()
        .name(format!("model-server-{}", local.port()))
        .spawn(move || {
            runtime.block_on(async move {
                let listener = match tokio::net::TcpListener::from_std(listener) {
                    Ok(l) => l,
                    Err(e) => {
                        let _ = ready_tx.send(Err(e));
                        return;
                    }
                };
                let _ = ready_tx.send(Ok(()));
                let served = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await;
                if let Err(e) = served {
                    tracing::warn!("server stopped with error: {e}");
                }
            });
        })
        .map_err(ServeError::Runtime)?;
    match ready_rx.recv() {
        Ok(Ok(())) => {}
        Ok(Err(source)) => {
            let _ = thread.join();
            return Err(ServeError::Bind { addr, source });
        }
        Err(_) => {
            let _ = thread.join();
            return Err(ServeError::Runtime(std::io::Error::other("server thread exited early")));
        }
    }
    tracing::debug!("serving on {local}");
    Ok(ServerHandle {
        addr: local,
        state,
        running: Mutex::new(Some(Running {
            stop: stop_tx,
            thread,
        })),
    })
}
