//! Benchmark model zoo.
//!
//! Analytic stand-ins for expensive application codes: a trivial doubling map,
//! a fixed-latency identity, a linear map with exact derivatives, a
//! multi-fidelity Gaussian posterior hierarchy and a smooth 2-D response
//! surface. All of them are servable.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crate::model::Model;
use crate::protocol::{Config, ParameterBlock, ProtocolError, Support};

fn require_finite(inputs: &[Vec<f64>]) -> Result<(), ProtocolError> {
    if inputs.iter().flatten().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ProtocolError::model_failure("non-finite input"))
    }
}

/// `F([x]) = [2x]`.
#[derive(Debug, Clone)]
pub struct DoublingModel {
    name: String,
}

impl DoublingModel {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into() }
    }
}

impl Default for DoublingModel {
    fn default() -> Self {
        Self::new("forward")
    }
}

impl Model for DoublingModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![1]
    }

    fn output_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![1]
    }

    fn evaluate(&self, inputs: &[Vec<f64>], _config: &Config) -> Result<ParameterBlock, ProtocolError> {
        require_finite(inputs)?;
        Ok(vec![vec![inputs[0][0] * 2.0]])
    }
}

/// Identity on a `dim`-vector that sleeps before answering.
///
/// Config key `delay_ms` overrides the default delay per request.
#[derive(Debug, Clone)]
pub struct DelayModel {
    name: String,
    dim: usize,
    delay: Duration,
}

impl DelayModel {
    pub const DEFAULT_DELAY: Duration = Duration::from_millis(250);

    pub fn new(name: impl Into<String>, dim: usize, delay: Duration) -> Self {
        assert!(dim >= 1, "dimension must be positive");
        Self {
            name: name.into(),
            dim,
            delay,
        }
    }

    pub fn delay_for(&self, config: &Config) -> Result<Duration, ProtocolError> {
        match config.get("delay_ms") {
            None => Ok(self.delay),
            Some(v) => v
                .as_f64()
                .filter(|ms| ms.is_finite() && *ms >= 0.0)
                .map(|ms| Duration::from_secs_f64(ms / 1000.0))
                .ok_or_else(|| ProtocolError::malformed(format!("invalid delay_ms: {v}"))),
        }
    }
}

impl Model for DelayModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![self.dim]
    }

    fn output_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![self.dim]
    }

    fn evaluate(&self, inputs: &[Vec<f64>], config: &Config) -> Result<ParameterBlock, ProtocolError> {
        require_finite(inputs)?;
        let delay = self.delay_for(config)?;
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        Ok(inputs.to_vec())
    }
}

/// `F(θ) = Aθ` with exact derivative actions.
#[derive(Debug, Clone)]
pub struct LinearModel {
    name: String,
    rows: Vec<Vec<f64>>,
    cols: usize,
}

impl LinearModel {
    /// `rows` is the m×n matrix `A` in row-major order.
    pub fn new(name: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self, ProtocolError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(ProtocolError::dimensions("matrix must be non-empty and rectangular"));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(ProtocolError::malformed("matrix entries must be finite"));
        }
        Ok(Self {
            name: name.into(),
            rows,
            cols,
        })
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn mul(&self, x: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn mul_transpose(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (row, &s) in self.rows.iter().zip(y) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * s;
            }
        }
        out
    }
}

impl Model for LinearModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![self.cols]
    }

    fn output_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![self.rows.len()]
    }

    fn supports(&self) -> Support {
        Support::all()
    }

    fn evaluate(&self, inputs: &[Vec<f64>], _config: &Config) -> Result<ParameterBlock, ProtocolError> {
        require_finite(inputs)?;
        Ok(vec![self.mul(&inputs[0])])
    }

    fn gradient(
        &self,
        _out_wrt: usize,
        _in_wrt: usize,
        inputs: &[Vec<f64>],
        sens: &[f64],
        _config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        require_finite(inputs)?;
        Ok(self.mul_transpose(sens))
    }

    fn apply_jacobian(
        &self,
        _out_wrt: usize,
        _in_wrt: usize,
        inputs: &[Vec<f64>],
        vec: &[f64],
        _config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        require_finite(inputs)?;
        Ok(self.mul(vec))
    }

    fn apply_hessian(
        &self,
        _out_wrt: usize,
        _in_wrt1: usize,
        _in_wrt2: usize,
        inputs: &[Vec<f64>],
        _sens: &[f64],
        _vec: &[f64],
        _config: &Config,
    ) -> Result<Vec<f64>, ProtocolError> {
        require_finite(inputs)?;
        Ok(vec![0.0; self.cols])
    }
}

/// Hierarchy of 2-D log-densities
/// `log π_ℓ(θ) = log N(θ; μ, Σ) + b₀·2^(−ℓ)·(sin θ₁ + cos θ₂)`.
///
/// Level `L = levels − 1` is the finest. The model has one input of size 2 and
/// returns the log-density as a single output; config key `level` selects ℓ
/// (default: finest).
#[derive(Debug, Clone)]
pub struct MultiFidelityGaussianPosterior {
    name: String,
    mean: [f64; 2],
    // lower Cholesky factor of Σ
    chol: [[f64; 2]; 2],
    log_norm: f64,
    bias: f64,
    levels: usize,
}

impl MultiFidelityGaussianPosterior {
    pub fn new(
        name: impl Into<String>,
        mean: [f64; 2],
        cov: [[f64; 2]; 2],
        bias: f64,
        levels: usize,
    ) -> Result<Self, ProtocolError> {
        if levels == 0 {
            return Err(ProtocolError::malformed("at least one level is required"));
        }
        if !bias.is_finite() || mean.iter().any(|m| !m.is_finite()) {
            return Err(ProtocolError::malformed("mean and bias must be finite"));
        }
        if cov[0][1] != cov[1][0] {
            return Err(ProtocolError::malformed("covariance must be symmetric"));
        }
        let l00 = cov[0][0].sqrt();
        let l10 = cov[1][0] / l00;
        let d = cov[1][1] - l10 * l10;
        if !(l00.is_finite() && l00 > 0.0 && d.is_finite() && d > 0.0) {
            return Err(ProtocolError::malformed("covariance must be positive definite"));
        }
        let l11 = d.sqrt();
        let log_norm = -(2.0 * std::f64::consts::PI).ln() - (l00 * l11).ln();
        Ok(Self {
            name: name.into(),
            mean,
            chol: [[l00, 0.0], [l10, l11]],
            log_norm,
            bias,
            levels,
        })
    }

    /// Standard normal target with the given bias amplitude.
    pub fn standard(name: impl Into<String>, bias: f64, levels: usize) -> Result<Self, ProtocolError> {
        Self::new(name, [0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], bias, levels)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn finest_level(&self) -> usize {
        self.levels - 1
    }

    pub fn bias_amplitude(&self, level: usize) -> f64 {
        self.bias * 0.5f64.powi(level as i32)
    }

    /// `log N(θ; μ, Σ)` without the level perturbation.
    pub fn log_gaussian(&self, theta: &[f64]) -> f64 {
        let r0 = theta[0] - self.mean[0];
        let r1 = theta[1] - self.mean[1];
        let z0 = r0 / self.chol[0][0];
        let z1 = (r1 - self.chol[1][0] * z0) / self.chol[1][1];
        self.log_norm - 0.5 * (z0 * z0 + z1 * z1)
    }

    pub fn log_density(&self, level: usize, theta: &[f64]) -> f64 {
        let perturbation = theta[0].sin() + theta[1].cos();
        self.log_gaussian(theta) + self.bias_amplitude(level) * perturbation
    }

    fn level_from(&self, config: &Config) -> Result<usize, ProtocolError> {
        match config.get("level") {
            None => Ok(self.finest_level()),
            Some(v) => v
                .as_u64()
                .map(|l| l as usize)
                .filter(|&l| l < self.levels)
                .ok_or_else(|| {
                    ProtocolError::malformed(format!(
                        "level must be an integer in 0..{}, got {v}",
                        self.levels
                    ))
                }),
        }
    }
}

impl Model for MultiFidelityGaussianPosterior {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![2]
    }

    fn output_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![1]
    }

    fn evaluate(&self, inputs: &[Vec<f64>], config: &Config) -> Result<ParameterBlock, ProtocolError> {
        require_finite(inputs)?;
        let level = self.level_from(config)?;
        Ok(vec![vec![self.log_density(level, &inputs[0])]])
    }
}

/// Smooth positive response `R(F, D) = exp(0.3·F)·(1 + 0.1·(D − D_mid)²)`.
#[derive(Debug, Clone)]
pub struct SmoothForwardModel {
    name: String,
    d_mid: f64,
}

impl SmoothForwardModel {
    /// Froude-number range of the default input domain.
    pub const FROUDE_RANGE: (f64, f64) = (0.25, 0.41);
    /// Draft range of the default input domain.
    pub const DRAFT_RANGE: (f64, f64) = (-6.776, -5.544);

    pub fn new(name: impl Into<String>, d_mid: f64) -> Self {
        Self {
            name: name.into(),
            d_mid,
        }
    }

    pub fn response(&self, froude: f64, draft: f64) -> f64 {
        let dd = draft - self.d_mid;
        (0.3 * froude).exp() * (1.0 + 0.1 * dd * dd)
    }
}

impl Default for SmoothForwardModel {
    fn default() -> Self {
        let (a, b) = Self::DRAFT_RANGE;
        Self::new("forward", 0.5 * (a + b))
    }
}

impl Model for SmoothForwardModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![2]
    }

    fn output_sizes(&self, _config: &Config) -> Vec<usize> {
        vec![1]
    }

    fn evaluate(&self, inputs: &[Vec<f64>], _config: &Config) -> Result<ParameterBlock, ProtocolError> {
        require_finite(inputs)?;
        let x = &inputs[0];
        Ok(vec![vec![self.response(x[0], x[1])]])
    }
}

type EvalFn = dyn Fn(&[Vec<f64>], &Config) -> Result<ParameterBlock, ProtocolError> + Send + Sync;

/// Evaluate-only model backed by a closure.
pub struct FnModel {
    name: String,
    input_sizes: Vec<usize>,
    output_sizes: Vec<usize>,
    f: Box<EvalFn>,
}

impl FnModel {
    pub fn new<F>(name: impl Into<String>, input_sizes: Vec<usize>, output_sizes: Vec<usize>, f: F) -> Self
    where
        F: Fn(&[Vec<f64>], &Config) -> Result<ParameterBlock, ProtocolError> + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            input_sizes,
            output_sizes,
            f: Box::new(f),
        }
    }
}

impl Model for FnModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn input_sizes(&self, _config: &Config) -> Vec<usize> {
        self.input_sizes.clone()
    }

    fn output_sizes(&self, _config: &Config) -> Vec<usize> {
        self.output_sizes.clone()
    }

    fn evaluate(&self, inputs: &[Vec<f64>], config: &Config) -> Result<ParameterBlock, ProtocolError> {
        (self.f)(inputs, config)
    }
}

/// Counters shared between an [`Instrumented`] model and an observer.
#[derive(Debug, Default)]
pub struct Probe {
    active: AtomicUsize,
    high_water: AtomicUsize,
    calls: AtomicUsize,
    spans: Mutex<Vec<(Instant, Instant)>>,
}

impl Probe {
    /// Largest number of simultaneously running evaluations seen so far.
    pub fn high_water(&self) -> usize {
        self.high_water.load(Ordering::SeqCst)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn active(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    /// (start, end) of every completed evaluation, in completion order.
    pub fn spans(&self) -> Vec<(Instant, Instant)> {
        self.spans.lock().unwrap().clone()
    }
}

/// Wraps a model and records how many evaluations overlap in time.
pub struct Instrumented<M> {
    inner: M,
    probe: Arc<Probe>,
}

impl<M: Model> Instrumented<M> {
    pub fn new(inner: M) -> Self {
        Self {
            inner,
            probe: Arc::new(Probe::default()),
        }
    }

    pub fn probe(&self) -> Arc<Probe> {
        Arc::clone(&self.probe)
    }
}

impl<M: Model> Model for Instrumented<M> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn input_sizes(&self, config: &Config) -> Vec<usize> {
        self.inner.input_sizes(config)
    }

    fn output_sizes(&self, config: &Config) -> Vec<usize> {
        self.inner.output_sizes(config)
    }

    fn supports(&self) -> Support {
        self.inner.supports()
    }

    fn evaluate(&self, inputs: &[Vec<f64>], config: &Config) -> Result<ParameterBlock, ProtocolError> {
        let p = &self.probe;
        let now = p.active.fetch_add(1, Ordering::SeqCst) + 1;
        p.high_water.fetch_max(now, Ordering::SeqCst);
        p.calls.fetch_add(1, Ordering::SeqCst);
        let start = Instant::now();
        let out = self.inner.evaluate(inputs, config);
        let end = Instant::now();
        p.spans.lock().unwrap().push((start, end));
        p.active.fetch_sub(1, Ordering::SeqCst);
        out
    }
}
