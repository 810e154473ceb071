use crate::protocol::{
    validate_outputs, Config, ModelDescriptor, Operation, OperationKind, OperationRequest,
    ParameterBlock, ProtocolError, Support,
};

/// A numerical model `F: Rⁿ → Rᵐ` addressable by name.
///
/// Implemented by local models hosted with [`crate::server::serve_models`] and
/// by [`crate::client::RemoteModel`], so UQ code can treat both alike.
/// Only `evaluate` is required; derivative operations default to
/// `UnsupportedOperation` and must be advertised through [`Model::supports`]
/// when overridden.
pub trait Model: Send + Sync {
    fn name(&self) -> &str;

    fn input_sizes(&self, config: &Config) -> Vec<usize>;

    fn output_sizes(&self, config: &Config) -> Vec<usize>;

    fn supports(&self) -> Support {
        Support::evaluate_only()
    }

    fn evaluate(&self, inputs: &[Vec<f64>], config: &Config) -> Result<ParameterBlock, ProtocolError>;

    /// `sensᵀ J(θ)` for output block `out_wrt` and input block `in_wrt`.
    fn gradient(
        &self,
        _out_wrt: usize,
        _in_wrt: usize,
        _inputs: &[Vec<f64>],
        _sens: &[f64],
        _config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        Err(ProtocolError::unsupported(OperationKind::Gradient, self.name()))
    }

    /// `J(θ) vec` for output block `out_wrt` and input block `in_wrt`.
    fn apply_jacobian(
        &self,
        _out_wrt: usize,
        _in_wrt: usize,
        _inputs: &[Vec<f64>],
        _vec: &[f64],
        _config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        Err(ProtocolError::unsupported(OperationKind::ApplyJacobian, self.name()))
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_hessian(
        &self,
        _out_wrt: usize,
        _in_wrt1: usize,
        _in_wrt2: usize,
        _inputs: &[Vec<f64>],
        _sens: &[f64],
        _vec: &[f64],
        _config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        Err(ProtocolError::unsupported(OperationKind::ApplyHessian, self.name()))
    }

    fn descriptor(&self, config: &Config) -> ModelDescriptor {
        ModelDescriptor {
            name: self.name().to_string(),
            input_sizes: self.input_sizes(config),
            output_sizes: self.output_sizes(config),
            supports: self.supports(),
        }
    }
}

/// Runs `req` against `model` without any validation.
pub fn dispatch(model: &dyn Model, req: &OperationRequest) -> Result<ParameterBlock, ProtocolError> {
    let theta = &req.parameters;
    let cfg = &req.config;
    match &req.operation {
        Operation::Evaluate => model.evaluate(theta, cfg),
        Operation::Gradient { out_wrt, in_wrt, sens } => model
            .gradient(*out_wrt, *in_wrt, theta, sens, cfg)
            .map(|v| vec![v]),
        Operation::ApplyJacobian { out_wrt, in_wrt, vec } => model
            .apply_jacobian(*out_wrt, *in_wrt, theta, vec, cfg)
            .map(|v| vec![v]),
        Operation::ApplyHessian {
            out_wrt,
            in_wrt1,
            in_wrt2,
            sens,
            vec,
        } => model
            .apply_hessian(*out_wrt, *in_wrt1, *in_wrt2, theta, sens, vec, cfg)
            .map(|v| vec![v]),
    }
}

/// Validates `req` against the model descriptor, runs it and checks the
/// result shape. This is what a server does for every operation request.
pub fn call_checked(model: &dyn Model, req: &OperationRequest) -> Result<ParameterBlock, ProtocolError> {
    let desc = model.descriptor(&req.config);
    crate::protocol::validate_against(req, &desc)?;
    let out = dispatch(model, req)?;
    validate_outputs(&out, &desc.response_shape(&req.operation))?;
    Ok(out)
}
