#![allow(dead_code)]

use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use modelbridge::models::{DelayModel, DoublingModel, Instrumented, Probe};
use modelbridge::{serve_models, Model, ServerConfig, ServerHandle};

static TIMING: Mutex<()> = Mutex::new(());

/// Serializes wall-clock sensitive tests within one test binary.
pub fn timing_lock() -> MutexGuard<'static, ()> {
    TIMING.lock().unwrap_or_else(|e| e.into_inner())
}

pub fn serve<M: Model + 'static>(model: M) -> ServerHandle {
    serve_models(vec![Arc::new(model)], ServerConfig::local()).expect("server starts")
}

pub fn serve_with(model: Arc<dyn Model>, cfg: ServerConfig) -> ServerHandle {
    serve_models(vec![model], cfg).expect("server starts")
}

/// A backend whose server does not serialize evaluations, so overlap
/// observed by the probe can only come from whoever sends the requests.
pub fn open_backend<M: Model + 'static>(model: M) -> (ServerHandle, Arc<Probe>) {
    let model = Instrumented::new(model);
    let probe = model.probe();
    let handle = serve_with(Arc::new(model), ServerConfig::local().with_max_concurrent(1024));
    (handle, probe)
}

pub fn doubling_backends(n: usize) -> Vec<(ServerHandle, Arc<Probe>)> {
    (0..n).map(|_| open_backend(DoublingModel::default())).collect()
}

pub fn delay_backends(n: usize, delay: Duration) -> Vec<(ServerHandle, Arc<Probe>)> {
    (0..n)
        .map(|_| open_backend(DelayModel::new("forward", 1, delay)))
        .collect()
}

pub fn post(url: &str, path: &str, body: &str) -> (u16, String) {
    let resp = reqwest::blocking::Client::new()
        .post(format!("{url}{path}"))
        .header("content-type", "application/json")
        .body(body.to_string())
        .send()
        .expect("request sent");
    let status = resp.status().as_u16();
    (status, resp.text().unwrap())
}

pub fn get(url: &str, path: &str) -> (u16, String) {
    let resp = reqwest::blocking::get(format!("{url}{path}")).expect("request sent");
    let status = resp.status().as_u16();
    (status, resp.text().unwrap())
}
