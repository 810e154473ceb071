//! Uncertainty quantification drivers that talk to models only through the
//! [`modelbridge::Model`] trait, so the same estimator runs against a local
//! model, a single remote server or a load-balanced pool.
//!
//! Forward problems: [`sample`], [`mc_mean`], [`qmc_mean`] and [`Kde`].
//! Inverse problems: [`rwm`] (random-walk Metropolis) and [`mlda`]
//! (multilevel delayed acceptance).

pub mod distribution;
mod error;
pub mod estimate;
pub mod halton;
pub mod kde;
pub mod mcmc;
pub mod mlda;
pub mod report;

pub use distribution::{Distribution, ProductDistribution};
pub use error::UqError;
pub use estimate::{
    evaluate_points, forward_mc, forward_qmc, mc_mean, qmc_mean, rng_for, sample, MeanEstimate, Provenance,
    SampleSet,
};
pub use halton::{halton, radical_inverse};
pub use kde::{Bandwidth, Kde};
pub use mcmc::{rwm, ChainResult, LevelTrace, LogDensity, ModelDensity};
pub use mlda::{mlda, pooled_samples, MldaHierarchy};
