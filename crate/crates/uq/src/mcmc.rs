//! Target densities, chain results and random-walk Metropolis.
//!
//! The chain engine here is shared with [`crate::mlda`]: a single-level
//! hierarchy is exactly random-walk Metropolis, and both consume the
//! generator in the same order (one standard normal per component for the
//! proposal, then one uniform only if the move is not accepted outright).

use std::sync::Arc;

use modelbridge::{Config, Model};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::estimate::{check_dimension, rng_for, to_block};
use crate::UqError;

/// Unnormalised log posterior. `-inf` marks points outside the support and
/// is a legitimate rejection; NaN and `+inf` abort the chain.
pub trait LogDensity: Send + Sync {
    fn log_density(&self, theta: &[f64]) -> Result<f64, UqError>;
}

impl<F> LogDensity for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn log_density(&self, theta: &[f64]) -> Result<f64, UqError> {
        Ok(self(theta))
    }
}

/// A model whose single scalar output is a log density, as served by
/// posterior models. Each call is one `Evaluate` request.
pub struct ModelDensity {
    model: Arc<dyn Model>,
    config: Config,
    sizes: Vec<usize>,
}

impl ModelDensity {
    pub fn new(model: Arc<dyn Model>, config: Config) -> Result<Self, UqError> {
        let sizes = model.input_sizes(&config);
        let outputs = model.output_sizes(&config);
        if outputs != [1] {
            return Err(UqError::InvalidArgument(format!(
                "model '{}' returns outputs {outputs:?}, a log density needs [1]",
                model.name()
            )));
        }
        Ok(Self { model, config, sizes })
    }

    pub fn dim(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn check_dimension(&self, dim: usize) -> Result<(), UqError> {
        check_dimension(self.model.as_ref(), dim, &self.config).map(|_| ())
    }
}

impl LogDensity for ModelDensity {
    fn log_density(&self, theta: &[f64]) -> Result<f64, UqError> {
        if theta.len() != self.dim() {
            return Err(UqError::Dimension { dist: theta.len(), model: self.dim() });
        }
        let out = self.model.evaluate(&to_block(theta, &self.sizes), &self.config)?;
        Ok(out[0][0])
    }
}

/// Every state visited by the sampler on one level, with transition and
/// evaluation counts.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelTrace {
    pub samples: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub proposed: u64,
    pub accepted: u64,
    pub evaluations: u64,
}

impl LevelTrace {
    /// Accepted over proposed transitions; 0 before any transition.
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn record(&mut self, p: &Point, level: usize) {
        self.samples.push(p.theta.clone());
        self.log_density.push(p.lp[level]);
    }
}

/// One chain; `levels[0]` is the coarsest, the last is the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainResult {
    pub chain: usize,
    pub levels: Vec<LevelTrace>,
    /// Why the chain stopped early, if it did. Samples up to that point are kept.
    pub aborted: Option<String>,
}

impl ChainResult {
    pub fn samples(&self) -> &[Vec<f64>] {
        &self.levels.last().expect("at least one level").samples
    }

    pub fn acceptance_rate(&self) -> Vec<f64> {
        self.levels.iter().map(LevelTrace::acceptance_rate).collect()
    }

    pub fn evaluations_per_level(&self) -> Vec<u64> {
        self.levels.iter().map(|l| l.evaluations).collect()
    }
}

/// A state with the log densities known so far; `lp[k]` is level `k`.
#[derive(Clone)]
struct Point {
    theta: Vec<f64>,
    lp: Vec<f64>,
}

pub(crate) enum ChainError {
    Start(UqError),
}

struct Engine<'a> {
    levels: &'a [&'a dyn LogDensity],
    subsampling: &'a [usize],
    sigma: &'a [f64],
    rng: ChaCha20Rng,
    traces: Vec<LevelTrace>,
}

impl Engine<'_> {
    fn eval(&mut self, level: usize, theta: &[f64]) -> Result<f64, String> {
        self.traces[level].evaluations += 1;
        match self.levels[level].log_density(theta) {
            Ok(lp) if lp.is_nan() || lp == f64::INFINITY => {
                Err(format!("level {level} log density is {lp} at {theta:?}"))
            }
            Ok(lp) => Ok(lp),
            Err(e) => Err(format!("level {level} evaluation failed at {theta:?}: {e}")),
        }
    }

    fn accept(&mut self, log_alpha: f64) -> bool {
        log_alpha >= 0.0 || self.rng.random::<f64>().ln() < log_alpha
    }

    /// One transition of the sampler on `level`, starting from `current`.
    fn step(&mut self, level: usize, current: Point) -> Result<Point, String> {
        let (proposal, log_alpha) = if level == 0 {
            let theta: Vec<f64> = current
                .theta
                .iter()
                .zip(self.sigma)
                .map(|(&x, &s)| {
                    let z: f64 = self.rng.sample(StandardNormal);
                    x + s * z
                })
                .collect();
            let lp = self.eval(0, &theta)?;
            let log_alpha = lp - current.lp[0];
            (Point { theta, lp: vec![lp] }, log_alpha)
        } else {
            let mut p = current.clone();
            for _ in 0..self.subsampling[level - 1] {
                p = self.step(level - 1, p)?;
            }
            let lp = self.eval(level, &p.theta)?;
            p.lp.truncate(level);
            p.lp.push(lp);
            let log_alpha = (p.lp[level] - current.lp[level]) - (p.lp[level - 1] - current.lp[level - 1]);
            (p, log_alpha)
        };
        self.traces[level].proposed += 1;
        let next = if self.accept(log_alpha) {
            self.traces[level].accepted += 1;
            proposal
        } else {
            current
        };
        self.traces[level].record(&next, level);
        Ok(next)
    }
}

/// Runs `transitions` steps of the top level of the hierarchy. Failure to
/// evaluate at the start is an error; failures later end the chain with
/// `aborted` set.
pub(crate) fn run_chain(
    levels: &[&dyn LogDensity],
    subsampling: &[usize],
    sigma: &[f64],
    theta0: &[f64],
    transitions: usize,
    seed: u64,
    chain: usize,
) -> Result<ChainResult, ChainError> {
    let mut engine = Engine {
        levels,
        subsampling,
        sigma,
        rng: rng_for(seed, chain as u64),
        traces: vec![LevelTrace::default(); levels.len()],
    };
    let mut lp = Vec::with_capacity(levels.len());
    for level in 0..levels.len() {
        engine.traces[level].evaluations += 1;
        let v = levels[level].log_density(theta0).map_err(ChainError::Start)?;
        if !v.is_finite() {
            return Err(ChainError::Start(UqError::NonFiniteStart(v)));
        }
        lp.push(v);
    }
    let mut current = Point { theta: theta0.to_vec(), lp };
    for (level, trace) in engine.traces.iter_mut().enumerate() {
        trace.record(&current, level);
    }
    let top = levels.len() - 1;
    let mut aborted = None;
    for _ in 0..transitions {
        match engine.step(top, current.clone()) {
            Ok(next) => current = next,
            Err(e) => {
                aborted = Some(e);
                break;
            }
        }
    }
    Ok(ChainResult { chain, levels: engine.traces, aborted })
}

pub(crate) fn check_sigma(sigma: &[f64], dim: usize) -> Result<(), UqError> {
    if sigma.len() != dim {
        return Err(UqError::InvalidArgument(format!(
            "proposal has {} step sizes for a {dim}-dimensional state",
            sigma.len()
        )));
    }
    if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(UqError::InvalidArgument("proposal step sizes must be finite and non-negative".into()));
    }
    Ok(())
}

/// Random-walk Metropolis with Gaussian proposal `theta + sigma * z`.
/// Returns a chain of `n` states including `theta0`, drawn from stream 0 of
/// `seed`.
pub fn rwm(
    target: &dyn LogDensity,
    theta0: &[f64],
    sigma: &[f64],
    n: usize,
    seed: u64,
) -> Result<ChainResult, UqError> {
    if n == 0 {
        return Err(UqError::InvalidArgument("chain length must be at least 1".into()));
    }
    check_sigma(sigma, theta0.len())?;
    run_chain(&[target], &[], sigma, theta0, n - 1, seed, 0).map_err(|ChainError::Start(e)| e)
}
