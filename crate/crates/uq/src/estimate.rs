//! Sampling and forward-propagation estimators.

use modelbridge::{evaluate_batch, Config, Model, ParameterBlock};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::distribution::ProductDistribution;
use crate::halton::halton;
use crate::UqError;

/// Generator for stream `stream` of master seed `seed`. Every sampler in the
/// crate derives its randomness this way; chain `i` of a multi-chain run
/// uses stream `i`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `n` independent draws from `dist`, reproducible from `seed`.
pub fn sample(dist: &ProductDistribution, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, UqError> {
    if n == 0 {
        return Err(UqError::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = rng_for(seed, 0);
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mc,
    Qmc,
    Mcmc,
}

/// Input points and the flattened model output at each of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub points: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn estimate(&self) -> MeanEstimate {
        MeanEstimate::from_values(&self.values)
    }

    /// Output component `i` of every sample.
    pub fn output(&self, i: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: Vec<f64>,
    /// Sample standard deviation over `sqrt(n)`; reported as 0 for `n = 1`.
    pub stderr: Vec<f64>,
    pub n: usize,
}

impl MeanEstimate {
    /// Welford's running mean and variance, component-wise.
    pub fn from_values(values: &[Vec<f64>]) -> Self {
        let dim = values.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for (k, v) in values.iter().enumerate() {
            let k = (k + 1) as f64;
            for j in 0..dim {
                let delta = v[j] - mean[j];
                mean[j] += delta / k;
                m2[j] += delta * (v[j] - mean[j]);
            }
        }
        let n = values.len();
        let stderr = m2
            .iter()
            .map(|&s| if n > 1 { (s / (n - 1) as f64 / n as f64).sqrt() } else { 0.0 })
            .collect();
        Self { mean, stderr, n }
    }
}

pub(crate) fn to_block(theta: &[f64], sizes: &[usize]) -> ParameterBlock {
    let mut rest = theta;
    sizes
        .iter()
        .map(|&s| {
            let (head, tail) = rest.split_at(s);
            rest = tail;
            head.to_vec()
        })
        .collect()
}

/// Checks that the model takes exactly `dim` scalar inputs and returns its
/// input block sizes.
pub fn check_dimension<M: Model + ?Sized>(model: &M, dim: usize, config: &Config) -> Result<Vec<usize>, UqError> {
    let sizes = model.input_sizes(config);
    let total: usize = sizes.iter().sum();
    if total != dim {
        return Err(UqError::Dimension { dist: dim, model: total });
    }
    Ok(sizes)
}

/// Evaluates the model at every point with up to `parallelism` requests in
/// flight. Fails if any evaluation fails; the error carries an estimate over
/// the successful ones.
pub fn evaluate_points<M: Model + ?Sized>(
    model: &M,
    points: Vec<Vec<f64>>,
    config: &Config,
    parallelism: usize,
    provenance: Provenance,
) -> Result<SampleSet, UqError> {
    let dim = points.first().map_or(0, Vec::len);
    let sizes = check_dimension(model, dim, config)?;
    let batch: Vec<ParameterBlock> = points.iter().map(|p| to_block(p, &sizes)).collect();
    let results = evaluate_batch(model, &batch, config, parallelism);
    let total = results.len();
    let mut values = Vec::with_capacity(total);
    let mut failure = None;
    let mut failed = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(out) => values.push(out.into_iter().flatten().collect::<Vec<f64>>()),
            Err(e) => {
                failed += 1;
                failure.get_or_insert((i, e));
            }
        }
    }
    if let Some((first, source)) = failure {
        let partial = (!values.is_empty()).then(|| MeanEstimate::from_values(&values));
        return Err(UqError::Evaluation { failed, total, first, source, partial });
    }
    Ok(SampleSet { points, values, provenance })
}

/// Monte Carlo: `n` random inputs pushed through the model.
pub fn forward_mc<M: Model + ?Sized>(
    model: &M,
    dist: &ProductDistribution,
    n: usize,
    config: &Config,
    parallelism: usize,
    seed: u64,
) -> Result<SampleSet, UqError> {
    check_dimension(model, dist.dim(), config)?;
    let points = sample(dist, n, seed)?;
    evaluate_points(model, points, config, parallelism, Provenance::Mc)
}

/// Quasi-Monte Carlo: the first `n` Halton points mapped through the
/// component quantile functions.
pub fn forward_qmc<M: Model + ?Sized>(
    model: &M,
    dist: &ProductDistribution,
    n: usize,
    config: &Config,
    parallelism: usize,
) -> Result<SampleSet, UqError> {
    if n == 0 {
        return Err(UqError::InvalidArgument("need at least one point".into()));
    }
    dist.check_invertible()?;
    check_dimension(model, dist.dim(), config)?;
    let points = halton(n, dist.dim())
        .iter()
        .map(|u| dist.inverse_cdf(u))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_points(model, points, config, parallelism, Provenance::Qmc)
}

pub fn mc_mean<M: Model + ?Sized>(
    model: &M,
    dist: &ProductDistribution,
    n: usize,
    config: &Config,
    parallelism: usize,
    seed: u64,
) -> Result<MeanEstimate, UqError> {
    forward_mc(model, dist, n, config, parallelism, seed).map(|s| s.estimate())
}

pub fn qmc_mean<M: Model + ?Sized>(
    model: &M,
    dist: &ProductDistribution,
    n: usize,
    config: &Config,
    parallelism: usize,
) -> Result<Vec<f64>, UqError> {
    forward_qmc(model, dist, n, config, parallelism).map(|s| s.estimate().mean)
}
