use modelbridge::ProtocolError;

use crate::estimate::MeanEstimate;

#[derive(Debug, thiserror::Error)]
pub enum UqError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("distribution has {dist} components but the model takes {model} inputs")]
    Dimension { dist: usize, model: usize },
    #[error("rejection sampler gave up after {0} proposals")]
    RejectionCap(u64),
    #[error("{0} has no inverse CDF")]
    NoInverseCdf(String),
    #[error("samples have zero variance")]
    ZeroVariance,
    #[error("log density is not finite at the starting point ({0})")]
    NonFiniteStart(f64),
    #[error("{failed} of {total} evaluations failed, first at index {first}: {source}")]
    Evaluation {
        failed: usize,
        total: usize,
        first: usize,
        #[source]
        source: ProtocolError,
        /// Estimate over the evaluations that did succeed, if any.
        partial: Option<MeanEstimate>,
    },
    #[error(transparent)]
    Model(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
