//! Wire data model and JSON encoding shared by the server, client and balancer.
//!
//! Every model operation travels as a JSON object over HTTP. Field names are
//! fixed: `name`, `input` (a list of vectors), `config`, `outWrt`, `inWrt`
//! (`inWrt1`/`inWrt2` for Hessian actions), `sens`, `vec`. Responses carry
//! `output`, which is a list of vectors for `Evaluate` and a single vector for
//! the derivative operations. Errors are reported as
//! `{"error":{"type":"<kind>","message":"..."}}`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Version advertised by `GET /Info`.
pub const PROTOCOL_VERSION: u32 = 1;

/// Default TCP port of a model server.
pub const DEFAULT_PORT: u16 = 4242;

/// One vector per declared model input (or output).
pub type ParameterBlock = Vec<Vec<f64>>;

/// Error categories that can cross the wire. Each maps to one HTTP status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorKind {
    UnknownModel,
    UnsupportedOperation,
    InvalidDimensions,
    MalformedRequest,
    ModelFailure,
    Unavailable,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 6] = [
        ErrorKind::UnknownModel,
        ErrorKind::UnsupportedOperation,
        ErrorKind::InvalidDimensions,
        ErrorKind::MalformedRequest,
        ErrorKind::ModelFailure,
        ErrorKind::Unavailable,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::UnknownModel => "UnknownModel",
            ErrorKind::UnsupportedOperation => "UnsupportedOperation",
            ErrorKind::InvalidDimensions => "InvalidDimensions",
            ErrorKind::MalformedRequest => "MalformedRequest",
            ErrorKind::ModelFailure => "ModelFailure",
            ErrorKind::Unavailable => "Unavailable",
        }
    }

    /// HTTP status code used when this error is returned by a server.
    pub fn http_status(self) -> u16 {
        match self {
            ErrorKind::UnknownModel
            | ErrorKind::UnsupportedOperation
            | ErrorKind::InvalidDimensions
            | ErrorKind::MalformedRequest => 400,
            ErrorKind::ModelFailure => 500,
            ErrorKind::Unavailable => 503,
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorKind {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ErrorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind}: {message}")]
pub struct ProtocolError {
    pub kind: ErrorKind,
    pub message: String,
}

impl ProtocolError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn unknown_model(name: &str) -> Self {
        Self::new(ErrorKind::UnknownModel, format!("model '{name}' not found"))
    }

    pub fn unsupported(op: OperationKind, model: &str) -> Self {
        Self::new(
            ErrorKind::UnsupportedOperation,
            format!("model '{model}' does not support {op}"),
        )
    }

    pub fn dimensions(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::InvalidDimensions, message)
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::MalformedRequest, message)
    }

    pub fn model_failure(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::ModelFailure, message)
    }

    pub fn unavailable(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Unavailable, message)
    }

    /// JSON error body, `{"error":{"type":...,"message":...}}`.
    pub fn to_json(&self) -> Vec<u8> {
        let body = WireErrorBody {
            error: WireError {
                kind: self.kind.as_str().to_string(),
                message: self.message.clone(),
            },
        };
        serde_json::to_vec(&body).expect("error body serializes")
    }

    /// Parses an error body produced by [`ProtocolError::to_json`].
    pub fn from_json(raw: &[u8]) -> Option<Self> {
        let body: WireErrorBody = serde_json::from_slice(raw).ok()?;
        let kind = body.error.kind.parse().ok()?;
        Some(Self::new(kind, body.error.message))
    }
}

#[derive(Serialize, Deserialize)]
struct WireErrorBody {
    error: WireError,
}

#[derive(Serialize, Deserialize)]
struct WireError {
    #[serde(rename = "type")]
    kind: String,
    message: String,
}

/// Free-form options forwarded verbatim to the model, e.g. `{"level": 0}`.
///
/// Keys are kept sorted so that encoding is canonical.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Config(BTreeMap<String, Value>);

impl Config {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.0.insert(key.into(), value.into());
        self
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.0.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn get_i64(&self, key: &str) -> Option<i64> {
        self.0.get(key).and_then(Value::as_i64)
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(Value::as_f64)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.0.iter()
    }
}

impl From<BTreeMap<String, Value>> for Config {
    fn from(map: BTreeMap<String, Value>) -> Self {
        Self(map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OperationKind {
    Evaluate,
    Gradient,
    ApplyJacobian,
    ApplyHessian,
}

impl OperationKind {
    pub const ALL: [OperationKind; 4] = [
        OperationKind::Evaluate,
        OperationKind::Gradient,
        OperationKind::ApplyJacobian,
        OperationKind::ApplyHessian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperationKind::Evaluate => "Evaluate",
            OperationKind::Gradient => "Gradient",
            OperationKind::ApplyJacobian => "ApplyJacobian",
            OperationKind::ApplyHessian => "ApplyHessian",
        }
    }

    /// URL path of the endpoint serving this operation.
    pub fn path(self) -> &'static str {
        match self {
            OperationKind::Evaluate => "/Evaluate",
            OperationKind::Gradient => "/Gradient",
            OperationKind::ApplyJacobian => "/ApplyJacobian",
            OperationKind::ApplyHessian => "/ApplyHessian",
        }
    }

    pub fn from_path(path: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.path() == path)
    }
}

impl fmt::Display for OperationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Capability flags of a model, one per operation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Support {
    #[serde(rename = "Evaluate")]
    pub evaluate: bool,
    #[serde(rename = "Gradient")]
    pub gradient: bool,
    #[serde(rename = "ApplyJacobian")]
    pub apply_jacobian: bool,
    #[serde(rename = "ApplyHessian")]
    pub apply_hessian: bool,
}

impl Support {
    pub fn evaluate_only() -> Self {
        Self {
            evaluate: true,
            ..Self::default()
        }
    }

    pub fn all() -> Self {
        Self {
            evaluate: true,
            gradient: true,
            apply_jacobian: true,
            apply_hessian: true,
        }
    }

    pub fn contains(&self, op: OperationKind) -> bool {
        match op {
            OperationKind::Evaluate => self.evaluate,
            OperationKind::Gradient => self.gradient,
            OperationKind::ApplyJacobian => self.apply_jacobian,
            OperationKind::ApplyHessian => self.apply_hessian,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.evaluate || self.gradient || self.apply_jacobian || self.apply_hessian)
    }
}

/// Name, dimensions and capabilities of one served model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDescriptor {
    pub name: String,
    pub input_sizes: Vec<usize>,
    pub output_sizes: Vec<usize>,
    pub supports: Support,
}

impl ModelDescriptor {
    pub fn new(
        name: impl Into<String>,
        input_sizes: Vec<usize>,
        output_sizes: Vec<usize>,
        supports: Support,
    ) -> Result<Self, ProtocolError> {
        let desc = Self {
            name: name.into(),
            input_sizes,
            output_sizes,
            supports,
        };
        desc.check()?;
        Ok(desc)
    }

    /// Checks the descriptor invariants.
    pub fn check(&self) -> Result<(), ProtocolError> {
        if self.name.is_empty() {
            return Err(ProtocolError::malformed("model name is empty"));
        }
        for (what, sizes) in [("input", &self.input_sizes), ("output", &self.output_sizes)] {
            if sizes.is_empty() || sizes.contains(&0) {
                return Err(ProtocolError::dimensions(format!(
                    "{what} sizes of '{}' must be a non-empty list of positive integers, got {sizes:?}",
                    self.name
                )));
            }
        }
        if self.supports.is_empty() {
            return Err(ProtocolError::malformed(format!(
                "model '{}' supports no operation",
                self.name
            )));
        }
        Ok(())
    }

    /// Shape of a successful response to `op`.
    pub fn response_shape(&self, op: &Operation) -> Vec<usize> {
        match op {
            Operation::Evaluate => self.output_sizes.clone(),
            Operation::Gradient { in_wrt, .. } => vec![self.input_sizes[*in_wrt]],
            Operation::ApplyJacobian { out_wrt, .. } => vec![self.output_sizes[*out_wrt]],
            Operation::ApplyHessian { in_wrt1, .. } => vec![self.input_sizes[*in_wrt1]],
        }
    }
}

/// A model operation together with its operation-specific arguments.
#[derive(Debug, Clone, PartialEq)]
pub enum Operation {
    Evaluate,
    /// `sensᵀ J(θ)` restricted to the given output and input blocks.
    Gradient {
        out_wrt: usize,
        in_wrt: usize,
        sens: Vec<f64>,
    },
    /// `J(θ) vec`.
    ApplyJacobian {
        out_wrt: usize,
        in_wrt: usize,
        vec: Vec<f64>,
    },
    /// Action of the Hessian of `sensᵀ F` on `vec`.
    ApplyHessian {
        out_wrt: usize,
        in_wrt1: usize,
        in_wrt2: usize,
        sens: Vec<f64>,
        vec: Vec<f64>,
    },
}

impl Operation {
    pub fn kind(&self) -> OperationKind {
        match self {
            Operation::Evaluate => OperationKind::Evaluate,
            Operation::Gradient { .. } => OperationKind::Gradient,
            Operation::ApplyJacobian { .. } => OperationKind::ApplyJacobian,
            Operation::ApplyHessian { .. } => OperationKind::ApplyHessian,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperationRequest {
    pub model_name: String,
    pub parameters: ParameterBlock,
    pub config: Config,
    pub operation: Operation,
}

impl OperationRequest {
    pub fn evaluate(model_name: impl Into<String>, parameters: ParameterBlock, config: Config) -> Self {
        Self {
            model_name: model_name.into(),
            parameters,
            config,
            operation: Operation::Evaluate,
        }
    }

    pub fn kind(&self) -> OperationKind {
        self.operation.kind()
    }
}

#[derive(Serialize, Deserialize)]
struct WireRequest {
    name: String,
    input: Vec<Vec<f64>>,
    #[serde(default)]
    config: Config,
    #[serde(rename = "outWrt", default, skip_serializing_if = "Option::is_none")]
    out_wrt: Option<usize>,
    #[serde(rename = "inWrt", default, skip_serializing_if = "Option::is_none")]
    in_wrt: Option<usize>,
    #[serde(rename = "inWrt1", default, skip_serializing_if = "Option::is_none")]
    in_wrt1: Option<usize>,
    #[serde(rename = "inWrt2", default, skip_serializing_if = "Option::is_none")]
    in_wrt2: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sens: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vec: Option<Vec<f64>>,
}

/// Canonical JSON body for `req`. Equal requests encode to identical bytes.
pub fn encode_request(req: &OperationRequest) -> Vec<u8> {
    let mut wire = WireRequest {
        name: req.model_name.clone(),
        input: req.parameters.clone(),
        config: req.config.clone(),
        out_wrt: None,
        in_wrt: None,
        in_wrt1: None,
        in_wrt2: None,
        sens: None,
        vec: None,
    };
    match &req.operation {
        Operation::Evaluate => {}
        Operation::Gradient { out_wrt, in_wrt, sens } => {
            wire.out_wrt = Some(*out_wrt);
            wire.in_wrt = Some(*in_wrt);
            wire.sens = Some(sens.clone());
        }
        Operation::ApplyJacobian { out_wrt, in_wrt, vec } => {
            wire.out_wrt = Some(*out_wrt);
            wire.in_wrt = Some(*in_wrt);
            wire.vec = Some(vec.clone());
        }
        Operation::ApplyHessian {
            out_wrt,
            in_wrt1,
            in_wrt2,
            sens,
            vec,
        } => {
            wire.out_wrt = Some(*out_wrt);
            wire.in_wrt1 = Some(*in_wrt1);
            wire.in_wrt2 = Some(*in_wrt2);
            wire.sens = Some(sens.clone());
            wire.vec = Some(vec.clone());
        }
    }
    serde_json::to_vec(&wire).expect("request serializes")
}

/// Decodes a request body, inferring the operation from the fields present.
///
/// Never panics; anything that is not a well-formed request yields
/// `MalformedRequest`.
pub fn decode_request(raw: &[u8]) -> Result<OperationRequest, ProtocolError> {
    let wire: WireRequest = serde_json::from_slice(raw)
        .map_err(|e| ProtocolError::malformed(format!("invalid request body: {e}")))?;
    let missing = |field: &str| ProtocolError::malformed(format!("missing field '{field}'"));
    let hessian = wire.in_wrt1.is_some() || wire.in_wrt2.is_some();
    let operation = if hessian {
        if wire.in_wrt.is_some() {
            return Err(ProtocolError::malformed(
                "'inWrt' cannot be combined with 'inWrt1'/'inWrt2'",
            ));
        }
        Operation::ApplyHessian {
            out_wrt: wire.out_wrt.ok_or_else(|| missing("outWrt"))?,
            in_wrt1: wire.in_wrt1.ok_or_else(|| missing("inWrt1"))?,
            in_wrt2: wire.in_wrt2.ok_or_else(|| missing("inWrt2"))?,
            sens: wire.sens.ok_or_else(|| missing("sens"))?,
            vec: wire.vec.ok_or_else(|| missing("vec"))?,
        }
    } else {
        match (wire.sens, wire.vec) {
            (Some(sens), None) => Operation::Gradient {
                out_wrt: wire.out_wrt.ok_or_else(|| missing("outWrt"))?,
                in_wrt: wire.in_wrt.ok_or_else(|| missing("inWrt"))?,
                sens,
            },
            (None, Some(vec)) => Operation::ApplyJacobian {
                out_wrt: wire.out_wrt.ok_or_else(|| missing("outWrt"))?,
                in_wrt: wire.in_wrt.ok_or_else(|| missing("inWrt"))?,
                vec,
            },
            (None, None) => {
                if wire.out_wrt.is_some() || wire.in_wrt.is_some() {
                    return Err(ProtocolError::malformed(
                        "'outWrt'/'inWrt' given without 'sens' or 'vec'",
                    ));
                }
                Operation::Evaluate
            }
            (Some(_), Some(_)) => {
                return Err(ProtocolError::malformed(
                    "'sens' and 'vec' together require 'inWrt1' and 'inWrt2'",
                ))
            }
        }
    };
    Ok(OperationRequest {
        model_name: wire.name,
        parameters: wire.input,
        config: wire.config,
        operation,
    })
}

/// Like [`decode_request`], but additionally requires the body to describe `expected`.
pub fn decode_request_as(
    expected: OperationKind,
    raw: &[u8],
) -> Result<OperationRequest, ProtocolError> {
    let req = decode_request(raw)?;
    if req.kind() != expected {
        return Err(ProtocolError::malformed(format!(
            "body describes {} but was sent to {}",
            req.kind(),
            expected.path()
        )));
    }
    Ok(req)
}

fn check_finite(what: &str, values: &[f64]) -> Result<(), ProtocolError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ProtocolError::dimensions(format!(
            "{what} entry {i} is not finite"
        ))),
        None => Ok(()),
    }
}

fn check_len(what: &str, values: &[f64], expected: usize) -> Result<(), ProtocolError> {
    if values.len() != expected {
        return Err(ProtocolError::dimensions(format!(
            "{what} has length {}, expected {expected}",
            values.len()
        )));
    }
    check_finite(what, values)
}

fn check_index(what: &str, index: usize, sizes: &[usize]) -> Result<usize, ProtocolError> {
    sizes.get(index).copied().ok_or_else(|| {
        ProtocolError::dimensions(format!(
            "{what} = {index} out of range for {} blocks",
            sizes.len()
        ))
    })
}

/// Accepts `req` iff it targets `desc`, uses a supported operation and all
/// shapes match the descriptor.
pub fn validate_against(req: &OperationRequest, desc: &ModelDescriptor) -> Result<(), ProtocolError> {
    if req.model_name != desc.name {
        return Err(ProtocolError::unknown_model(&req.model_name));
    }
    if !desc.supports.contains(req.kind()) {
        return Err(ProtocolError::unsupported(req.kind(), &desc.name));
    }
    if req.parameters.len() != desc.input_sizes.len() {
        return Err(ProtocolError::dimensions(format!(
            "got {} input vectors, model '{}' expects {}",
            req.parameters.len(),
            desc.name,
            desc.input_sizes.len()
        )));
    }
    for (i, (block, &size)) in req.parameters.iter().zip(&desc.input_sizes).enumerate() {
        check_len(&format!("input {i}"), block, size)?;
    }
    match &req.operation {
        Operation::Evaluate => {}
        Operation::Gradient { out_wrt, in_wrt, sens } => {
            let m = check_index("outWrt", *out_wrt, &desc.output_sizes)?;
            check_index("inWrt", *in_wrt, &desc.input_sizes)?;
            check_len("sens", sens, m)?;
        }
        Operation::ApplyJacobian { out_wrt, in_wrt, vec } => {
            check_index("outWrt", *out_wrt, &desc.output_sizes)?;
            let n = check_index("inWrt", *in_wrt, &desc.input_sizes)?;
            check_len("vec", vec, n)?;
        }
        Operation::ApplyHessian {
            out_wrt,
            in_wrt1,
            in_wrt2,
            sens,
            vec,
        } => {
            let m = check_index("outWrt", *out_wrt, &desc.output_sizes)?;
            check_index("inWrt1", *in_wrt1, &desc.input_sizes)?;
            let n2 = check_index("inWrt2", *in_wrt2, &desc.input_sizes)?;
            check_len("sens", sens, m)?;
            check_len("vec", vec, n2)?;
        }
    }
    Ok(())
}

/// Checks that model outputs have `shape` and are finite.
pub fn validate_outputs(outputs: &[Vec<f64>], shape: &[usize]) -> Result<(), ProtocolError> {
    if outputs.len() != shape.len() {
        return Err(ProtocolError::model_failure(format!(
            "model returned {} output vectors, expected {}",
            outputs.len(),
            shape.len()
        )));
    }
    for (i, (v, &len)) in outputs.iter().zip(shape).enumerate() {
        if v.len() != len {
            return Err(ProtocolError::model_failure(format!(
                "output {i} has length {}, expected {len}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ProtocolError::model_failure(format!(
                "output {i} contains non-finite values"
            )));
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvaluateResponse {
    output: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct VectorResponse {
    output: Vec<f64>,
}

/// Encodes a successful response. `Evaluate` carries one vector per output;
/// derivative operations carry exactly one vector.
pub fn encode_response(op: OperationKind, outputs: &[Vec<f64>]) -> Vec<u8> {
    match op {
        OperationKind::Evaluate => serde_json::to_vec(&EvaluateResponse {
            output: outputs.to_vec(),
        }),
        _ => serde_json::to_vec(&VectorResponse {
            output: outputs.first().cloned().unwrap_or_default(),
        }),
    }
    .expect("response serializes")
}

/// Inverse of [`encode_response`]; derivative results come back as a single vector.
pub fn decode_response(op: OperationKind, raw: &[u8]) -> Result<ParameterBlock, ProtocolError> {
    let bad = |e: serde_json::Error| ProtocolError::malformed(format!("invalid response body: {e}"));
    match op {
        OperationKind::Evaluate => {
            let r: EvaluateResponse = serde_json::from_slice(raw).map_err(bad)?;
            Ok(r.output)
        }
        _ => {
            let r: VectorResponse = serde_json::from_slice(raw).map_err(bad)?;
            Ok(vec![r.output])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfoResponse {
    #[serde(rename = "protocolVersion")]
    pub protocol_version: u32,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizesRequest {
    pub name: String,
    #[serde(default)]
    pub config: Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSizesResponse {
    #[serde(rename = "inputSizes")]
    pub input_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSizesResponse {
    #[serde(rename = "outputSizes")]
    pub output_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfoRequest {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfoResponse {
    pub support: Support,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn doubling_descriptor() -> ModelDescriptor {
        ModelDescriptor::new("forward", vec![1], vec![1], Support::evaluate_only()).unwrap()
    }

    fn body(req: &OperationRequest) -> String {
        String::from_utf8(encode_request(req)).unwrap()
    }

    #[test]
    fn evaluate_body_uses_fixed_field_names() {
        let req = OperationRequest::evaluate("forward", vec![vec![3.0]], Config::new());
        let s = body(&req);
        assert!(s.contains(r#""name":"forward""#), "{s}");
        assert!(s.contains(r#""input":[[3.0]]"#), "{s}");
        assert_eq!(decode_request(s.as_bytes()).unwrap(), req);
    }

    #[test]
    fn config_is_passed_through() {
        let req = OperationRequest::evaluate(
            "forward",
            vec![vec![0.0, 10.0]],
            Config::new().with("level", 0),
        );
        let s = body(&req);
        assert!(s.contains(r#""config":{"level":0}"#), "{s}");
        assert_eq!(decode_request(s.as_bytes()).unwrap(), req);
    }

    #[test]
    fn zero_sensitivity_round_trips() {
        let req = OperationRequest {
            model_name: "m".into(),
            parameters: vec![vec![1.0, 2.0]],
            config: Config::new(),
            operation: Operation::Gradient {
                out_wrt: 0,
                in_wrt: 0,
                sens: vec![0.0, 0.0],
            },
        };
        let s = body(&req);
        assert!(s.contains(r#""sens":[0.0,0.0]"#), "{s}");
        assert!(s.contains(r#""outWrt":0"#) && s.contains(r#""inWrt":0"#), "{s}");
        assert_eq!(decode_request(s.as_bytes()).unwrap(), req);
    }

    #[test]
    fn hessian_uses_split_input_indices() {
        let req = OperationRequest {
            model_name: "m".into(),
            parameters: vec![vec![1.0], vec![2.0]],
            config: Config::new(),
            operation: Operation::ApplyHessian {
                out_wrt: 0,
                in_wrt1: 1,
                in_wrt2: 0,
                sens: vec![1.0],
                vec: vec![0.5],
            },
        };
        let s = body(&req);
        assert!(s.contains(r#""inWrt1":1"#) && s.contains(r#""inWrt2":0"#), "{s}");
        assert!(!s.contains(r#""inWrt":"#), "{s}");
        assert_eq!(decode_request(s.as_bytes()).unwrap(), req);
    }

    #[test]
    fn config_keys_are_sorted() {
        let a = Config::new().with("z", 1).with("a", 2);
        let b = Config::new().with("a", 2).with("z", 1);
        let ra = OperationRequest::evaluate("m", vec![vec![1.0]], a);
        let rb = OperationRequest::evaluate("m", vec![vec![1.0]], b);
        assert_eq!(encode_request(&ra), encode_request(&rb));
        assert!(body(&ra).contains(r#"{"a":2,"z":1}"#));
    }

    #[test]
    fn truncated_body_is_malformed() {
        let err = decode_request(br#"{"name":"forward""#).unwrap_err();
        assert_eq!(err.kind, ErrorKind::MalformedRequest);
    }

    #[test]
    fn missing_fields_are_malformed() {
        for raw in [
            r#"{"input":[[1.0]]}"#,
            r#"{"name":"m"}"#,
            r#"{"name":"m","input":[[1.0]],"sens":[1.0]}"#,
            r#"{"name":"m","input":[[1.0]],"outWrt":0,"inWrt":0}"#,
            r#"{"name":"m","input":[[1.0]],"outWrt":0,"inWrt1":0,"sens":[1.0],"vec":[1.0]}"#,
            r#"{"name":"m","input":[[1.0]],"outWrt":0,"inWrt":0,"sens":[1.0],"vec":[1.0]}"#,
            r#"[1,2,3]"#,
            "",
        ] {
            let err = decode_request(raw.as_bytes()).unwrap_err();
            assert_eq!(err.kind, ErrorKind::MalformedRequest, "{raw}");
        }
    }

    #[test]
    fn missing_config_defaults_to_empty() {
        let req = decode_request(br#"{"name":"m","input":[[1.0]]}"#).unwrap();
        assert!(req.config.is_empty());
    }

    #[test]
    fn decode_as_rejects_wrong_endpoint() {
        let raw = br#"{"name":"m","input":[[1.0]]}"#;
        assert!(decode_request_as(OperationKind::Evaluate, raw).is_ok());
        let err = decode_request_as(OperationKind::Gradient, raw).unwrap_err();
        assert_eq!(err.kind, ErrorKind::MalformedRequest);
    }

    #[test]
    fn extra_input_block_is_invalid_dimensions() {
        let req = decode_request(br#"{"name":"forward","input":[[1.0],[2.0]]}"#).unwrap();
        let err = validate_against(&req, &doubling_descriptor()).unwrap_err();
        assert_eq!(err.kind, ErrorKind::InvalidDimensions);
    }

    #[test]
    fn validate_examples() {
        let desc = doubling_descriptor();
        let ok = OperationRequest::evaluate("forward", vec![vec![3.0]], Config::new());
        assert!(validate_against(&ok, &desc).is_ok());

        let grad = OperationRequest {
            operation: Operation::Gradient {
                out_wrt: 0,
                in_wrt: 0,
                sens: vec![1.0],
            },
            ..ok.clone()
        };
        assert_eq!(
            validate_against(&grad, &desc).unwrap_err().kind,
            ErrorKind::UnsupportedOperation
        );

        let long = OperationRequest::evaluate("forward", vec![vec![1.0, 2.0]], Config::new());
        assert_eq!(
            validate_against(&long, &desc).unwrap_err().kind,
            ErrorKind::InvalidDimensions
        );

        let other = OperationRequest::evaluate("posterior", vec![vec![1.0]], Config::new());
        assert_eq!(
            validate_against(&other, &desc).unwrap_err().kind,
            ErrorKind::UnknownModel
        );

        let nan = OperationRequest::evaluate("forward", vec![vec![f64::NAN]], Config::new());
        assert_eq!(
            validate_against(&nan, &desc).unwrap_err().kind,
            ErrorKind::InvalidDimensions
        );
    }

    #[test]
    fn descriptor_invariants() {
        let s = Support::evaluate_only();
        assert!(ModelDescriptor::new("", vec![1], vec![1], s).is_err());
        assert!(ModelDescriptor::new("m", vec![], vec![1], s).is_err());
        assert!(ModelDescriptor::new("m", vec![1], vec![0], s).is_err());
        assert!(ModelDescriptor::new("m", vec![1], vec![1], Support::default()).is_err());
        assert!(ModelDescriptor::new("m", vec![2, 3], vec![1], s).is_ok());
    }

    #[test]
    fn error_body_round_trips() {
        for kind in ErrorKind::ALL {
            let e = ProtocolError::new(kind, "boom");
            let raw = e.to_json();
            let v: serde_json::Value = serde_json::from_slice(&raw).unwrap();
            assert_eq!(v, json!({"error": {"type": kind.as_str(), "message": "boom"}}));
            assert_eq!(ProtocolError::from_json(&raw), Some(e));
        }
        assert_eq!(ErrorKind::UnknownModel.http_status(), 400);
        assert_eq!(ErrorKind::ModelFailure.http_status(), 500);
        assert_eq!(ErrorKind::Unavailable.http_status(), 503);
    }

    #[test]
    fn response_shapes() {
        let raw = encode_response(OperationKind::Evaluate, &[vec![6.0]]);
        assert_eq!(raw, br#"{"output":[[6.0]]}"#);
        assert_eq!(decode_response(OperationKind::Evaluate, &raw).unwrap(), vec![vec![6.0]]);
        let raw = encode_response(OperationKind::Gradient, &[vec![2.0, 1.0]]);
        assert_eq!(raw, br#"{"output":[2.0,1.0]}"#);
        assert_eq!(
            decode_response(OperationKind::Gradient, &raw).unwrap(),
            vec![vec![2.0, 1.0]]
        );
    }

    #[test]
    fn support_wire_format() {
        let v = serde_json::to_value(ModelInfoResponse {
            support: Support::evaluate_only(),
        })
        .unwrap();
        assert_eq!(
            v,
            json!({"support": {"Evaluate": true, "Gradient": false, "ApplyJacobian": false, "ApplyHessian": false}})
        );
    }

    /// Enumerates every Evaluate/Gradient/ApplyJacobian request with block
    /// lengths up to 3 and checks validation against a direct shape comparison.
    #[test]
    fn shape_soundness_exhaustive() {
        let descs = [
            ModelDescriptor::new("m", vec![1], vec![2], Support::all()).unwrap(),
            ModelDescriptor::new("m", vec![2, 3], vec![1, 3], Support::all()).unwrap(),
            ModelDescriptor::new("m", vec![3], vec![3], Support::all()).unwrap(),
        ];
        let block_shapes: Vec<Vec<usize>> = {
            let mut all = vec![vec![]];
            for n in 1..=2 {
                let mut next = Vec::new();
                for shape in all.iter().filter(|s| s.len() == n - 1) {
                    for len in 0..=3 {
                        let mut s = shape.clone();
                        s.push(len);
                        next.push(s);
                    }
                }
                all.extend(next);
            }
            all
        };
        for desc in &descs {
            for shape in &block_shapes {
                let params: ParameterBlock = shape.iter().map(|&l| vec![0.5; l]).collect();
                let shape_ok = shape == &desc.input_sizes;
                let eval = OperationRequest::evaluate("m", params.clone(), Config::new());
                assert_eq!(validate_against(&eval, desc).is_ok(), shape_ok);
                for out_wrt in 0..3 {
                    for in_wrt in 0..3 {
                        for len in 0..=3 {
                            let grad = OperationRequest {
                                operation: Operation::Gradient {
                                    out_wrt,
                                    in_wrt,
                                    sens: vec![1.0; len],
                                },
                                ..eval.clone()
                            };
                            let expect = shape_ok
                                && in_wrt < desc.input_sizes.len()
                                && desc.output_sizes.get(out_wrt) == Some(&len);
                            assert_eq!(validate_against(&grad, desc).is_ok(), expect);
                            let jac = OperationRequest {
                                operation: Operation::ApplyJacobian {
                                    out_wrt,
                                    in_wrt,
                                    vec: vec![1.0; len],
                                },
                                ..eval.clone()
                            };
                            let expect = shape_ok
                                && out_wrt < desc.output_sizes.len()
                                && desc.input_sizes.get(in_wrt) == Some(&len);
                            assert_eq!(validate_against(&jac, desc).is_ok(), expect);
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn arb_request() -> impl Strategy<Value = OperationRequest> {
        let vecf = || prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 0..5);
        let params = prop::collection::vec(vecf(), 1..4);
        let config = prop::collection::btree_map(
            "[a-z]{1,6}",
            prop_oneof![
                any::<i64>().prop_map(Value::from),
                any::<bool>().prop_map(Value::from),
                "[ -~]{0,8}".prop_map(Value::from),
                (-1e6f64..1e6).prop_map(Value::from),
            ],
            0..4,
        );
        let op = prop_oneof![
            Just(Operation::Evaluate),
            (0usize..4, 0usize..4, vecf()).prop_map(|(out_wrt, in_wrt, sens)| Operation::Gradient {
                out_wrt,
                in_wrt,
                sens
            }),
            (0usize..4, 0usize..4, vecf()).prop_map(|(out_wrt, in_wrt, vec)| {
                Operation::ApplyJacobian { out_wrt, in_wrt, vec }
            }),
            (0usize..4, 0usize..4, 0usize..4, vecf(), vecf()).prop_map(
                |(out_wrt, in_wrt1, in_wrt2, sens, vec)| Operation::ApplyHessian {
                    out_wrt,
                    in_wrt1,
                    in_wrt2,
                    sens,
                    vec
                }
            ),
        ];
        ("[a-zA-Z0-9_\\-]{1,12}", params, config, op).prop_map(|(name, parameters, config, operation)| {
            OperationRequest {
                model_name: name,
                parameters,
                config: Config::from(config),
                operation,
            }
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(req in arb_request()) {
            let raw = encode_request(&req);
            let back = decode_request(&raw).unwrap();
            prop_assert_eq!(&back, &req);
            prop_assert_eq!(encode_request(&back), raw);
        }

        #[test]
        fn decoder_is_total(raw in prop::collection::vec(any::<u8>(), 0..256)) {
            if let Err(e) = decode_request(&raw) {
                prop_assert_eq!(e.kind, ErrorKind::MalformedRequest);
            }
        }
    }
}
