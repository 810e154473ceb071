//! Blocking client that makes a served model look like a local [`Model`].
//!
//! The client uses blocking HTTP and must not be created or dropped from
//! inside an async runtime; wrap calls in `spawn_blocking` there.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::model::Model;
use crate::protocol::{
    decode_response, encode_request, validate_against, Config, ErrorKind, InfoResponse,
    InputSizesResponse, ModelDescriptor, ModelInfoRequest, ModelInfoResponse, Operation,
    OperationRequest, OutputSizesResponse, ParameterBlock, ProtocolError, SizesRequest, Support,
};

#[derive(Debug, Clone, Default)]
pub struct ClientOptions {
    /// Per-request timeout; `None` waits indefinitely, which is what
    /// long-running model evaluations need.
    pub timeout: Option<Duration>,
    /// Extra attempts after an `Unavailable` failure.
    pub retries: u32,
}

/// Proxy for one named model on a remote server.
///
/// The descriptor is fetched once by [`RemoteModel::connect`]; reconnect to
/// refresh it. Safe to share across threads; concurrent calls use separate
/// pooled connections.
#[derive(Debug, Clone)]
pub struct RemoteModel {
    base: String,
    descriptor: ModelDescriptor,
    http: Client,
    options: ClientOptions,
}

fn transport_error(e: reqwest::Error) -> ProtocolError {
    ProtocolError::unavailable(format!("request failed: {e}"))
}

fn error_from_status(status: u16, body: &[u8]) -> ProtocolError {
    if let Some(e) = ProtocolError::from_json(body) {
        return e;
    }
    let kind = match status {
        503 => ErrorKind::Unavailable,
        500..=599 => ErrorKind::ModelFailure,
        _ => ErrorKind::MalformedRequest,
    };
    ProtocolError::new(
        kind,
        format!("HTTP {status}: {}", String::from_utf8_lossy(body)),
    )
}

impl RemoteModel {
    pub fn connect(url: &str, name: &str) -> Result<Self, ProtocolError> {
        Self::connect_with(url, name, ClientOptions::default())
    }

    pub fn connect_with(url: &str, name: &str, options: ClientOptions) -> Result<Self, ProtocolError> {
        let http = Client::builder()
            .timeout(options.timeout)
            .build()
            .map_err(transport_error)?;
        let base = url.trim_end_matches('/').to_string();
        let mut model = Self {
            base,
            descriptor: ModelDescriptor {
                name: name.to_string(),
                input_sizes: Vec::new(),
                output_sizes: Vec::new(),
                supports: Support::default(),
            },
            http,
            options,
        };
        let info: InfoResponse = model.get_json("/Info")?;
        if !info.models.iter().any(|m| m == name) {
            return Err(ProtocolError::unknown_model(name));
        }
        let sizes = SizesRequest {
            name: name.to_string(),
            config: Config::new(),
        };
        let inputs: InputSizesResponse = model.post_json("/InputSizes", &sizes)?;
        let outputs: OutputSizesResponse = model.post_json("/OutputSizes", &sizes)?;
        let support: ModelInfoResponse = model.post_json(
            "/ModelInfo",
            &ModelInfoRequest {
                name: name.to_string(),
            },
        )?;
        model.descriptor = ModelDescriptor::new(
            name,
            inputs.input_sizes,
            outputs.output_sizes,
            support.support,
        )?;
        Ok(model)
    }

    pub fn url(&self) -> &str {
        &self.base
    }

    pub fn descriptor(&self) -> &ModelDescriptor {
        &self.descriptor
    }

    /// Names of all models served at `url`.
    pub fn list_models(url: &str) -> Result<Vec<String>, ProtocolError> {
        let http = Client::builder().build().map_err(transport_error)?;
        let resp = http
            .get(format!("{}/Info", url.trim_end_matches('/')))
            .send()
            .map_err(transport_error)?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(transport_error)?;
        if status != 200 {
            return Err(error_from_status(status, &body));
        }
        let info: InfoResponse = serde_json::from_slice(&body)
            .map_err(|e| ProtocolError::malformed(format!("invalid /Info body: {e}")))?;
        Ok(info.models)
    }

    fn with_retries<T>(&self, mut f: impl FnMut() -> Result<T, ProtocolError>) -> Result<T, ProtocolError> {
        let mut attempt = 0;
        loop {
            match f() {
                Err(e) if e.kind == ErrorKind::Unavailable && attempt < self.options.retries => {
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn finish(resp: reqwest::blocking::Response) -> Result<Vec<u8>, ProtocolError> {
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(transport_error)?;
        if status == 200 {
            Ok(body.to_vec())
        } else {
            Err(error_from_status(status, &body))
        }
    }

    fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T, ProtocolError> {
        let raw = self.with_retries(|| {
            let resp = self
                .http
                .get(format!("{}{path}", self.base))
                .send()
                .map_err(transport_error)?;
            Self::finish(resp)
        })?;
        serde_json::from_slice(&raw)
            .map_err(|e| ProtocolError::malformed(format!("invalid {path} response: {e}")))
    }

    fn post_raw(&self, path: &str, body: Vec<u8>) -> Result<Vec<u8>, ProtocolError> {
        self.with_retries(|| {
            let resp = self
                .http
                .post(format!("{}{path}", self.base))
                .header("content-type", "application/json")
                .body(body.clone())
                .send()
                .map_err(transport_error)?;
            Self::finish(resp)
        })
    }

    fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ProtocolError> {
        let raw = self.post_raw(path, serde_json::to_vec(body).expect("body serializes"))?;
        serde_json::from_slice(&raw)
            .map_err(|e| ProtocolError::malformed(format!("invalid {path} response: {e}")))
    }

    /// Sends any operation request. Capability and shapes are checked
    /// against the cached descriptor before anything goes on the wire.
    pub fn call(&self, req: &OperationRequest) -> Result<ParameterBlock, ProtocolError> {
        validate_against(req, &self.descriptor)?;
        let op = req.kind();
        let raw = self.post_raw(op.path(), encode_request(req))?;
        decode_response(op, &raw)
    }

    fn request(&self, parameters: &[Vec<f64>], config: &Config, operation: Operation) -> OperationRequest {
        OperationRequest {
            model_name: self.descriptor.name.clone(),
            parameters: parameters.to_vec(),
            config: config.clone(),
            operation,
        }
    }

    pub fn evaluate(&self, parameters: &[Vec<f64>], config: &Config) -> Result<ParameterBlock, ProtocolError> {
        self.call(&self.request(parameters, config, Operation::Evaluate))
    }

    pub fn gradient(
        &self,
        out_wrt: usize,
        in_wrt: usize,
        parameters: &[Vec<f64>],
        sens: &[f64],
        config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        let op = Operation::Gradient {
            out_wrt,
            in_wrt,
            sens: sens.to_vec(),
        };
        single(self.call(&self.request(parameters, config, op))?)
    }

    pub fn apply_jacobian(
        &self,
        out_wrt: usize,
        in_wrt: usize,
        parameters: &[Vec<f64>],
        vec: &[f64],
        config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        let op = Operation::ApplyJacobian {
            out_wrt,
            in_wrt,
            vec: vec.to_vec(),
        };
        single(self.call(&self.request(parameters, config, op))?)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn apply_hessian(
        &self,
        out_wrt: usize,
        in_wrt1: usize,
        in_wrt2: usize,
        parameters: &[Vec<f64>],
        sens: &[f64],
        vec: &[f64],
        config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        let op = Operation::ApplyHessian {
            out_wrt,
            in_wrt1,
            in_wrt2,
            sens: sens.to_vec(),
            vec: vec.to_vec(),
        };
        single(self.call(&self.request(parameters, config, op))?)
    }

    /// See [`evaluate_batch`].
    pub fn evaluate_batch(
        &self,
        batch: &[ParameterBlock],
        config: &Config,
        parallelism: usize,
    ) -> Vec<Result<ParameterBlock, ProtocolError>> {
        evaluate_batch(self, batch, config, parallelism)
    }
}

fn single(mut out: ParameterBlock) -> Result<Vec<f64>, ProtocolError> {
    if out.len() != 1 {
        return Err(ProtocolError::malformed("expected a single output vector"));
    }
    Ok(out.pop().unwrap_or_default())
}

impl Model for RemoteModel {
    fn name(&self) -> &str {
        &self.descriptor.name
    }

    fn input_sizes(&self, _config: &Config) -> Vec<usize> {
        self.descriptor.input_sizes.clone()
    }

    fn output_sizes(&self, _config: &Config) -> Vec<usize> {
        self.descriptor.output_sizes.clone()
    }

    fn supports(&self) -> Support {
        self.descriptor.supports
    }

    fn evaluate(&self, inputs: &[Vec<f64>], config: &Config) -> Result<ParameterBlock, ProtocolError> {
        RemoteModel::evaluate(self, inputs, config)
    }

    fn gradient(
        &self,
        out_wrt: usize,
        in_wrt: usize,
        inputs: &[Vec<f64>],
        sens: &[f64],
        config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        RemoteModel::gradient(self, out_wrt, in_wrt, inputs, sens, config)
    }

    fn apply_jacobian(
        &self,
        out_wrt: usize,
        in_wrt: usize,
        inputs: &[Vec<f64>],
        vec: &[f64],
        config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        RemoteModel::apply_jacobian(self, out_wrt, in_wrt, inputs, vec, config)
    }

    fn apply_hessian(
        &self,
        out_wrt: usize,
        in_wrt1: usize,
        in_wrt2: usize,
        inputs: &[Vec<f64>],
        sens: &[f64],
        vec: &[f64],
        config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        RemoteModel::apply_hessian(self, out_wrt, in_wrt1, in_wrt2, inputs, sens, vec, config)
    }
}

/// Evaluates every point of `batch` with at most `parallelism` calls in
/// flight. Result `i` belongs to `batch[i]`; a failed point does not stop
/// the others.
pub fn evaluate_batch<M: Model + ?Sized>(
    model: &M,
    batch: &[ParameterBlock],
    config: &Config,
    parallelism: usize,
) -> Vec<Result<ParameterBlock, ProtocolError>> {
    let workers = parallelism.max(1).min(batch.len());
    if workers <= 1 {
        return batch.iter().map(|p| model.evaluate(p, config)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<ParameterBlock, ProtocolError>>>> =
        Mutex::new((0..batch.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(point) = batch.get(i) else { break };
                let result = model.evaluate(point, config);
                slots.lock().unwrap()[i] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every index evaluated"))
        .collect()
}
