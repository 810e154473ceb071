//! Scalar input distributions and their independent products.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatrsNormal};
use statrs::function::gamma::ln_gamma;

use crate::UqError;

/// Proposals per draw before the beta rejection sampler reports a degenerate
/// envelope.
pub const REJECTION_CAP: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Distribution {
    Uniform { a: f64, b: f64 },
    Normal { mu: f64, sigma: f64 },
    /// Symmetric triangle on `[a, b]` with mode `(a + b) / 2`.
    Triangular { a: f64, b: f64 },
    /// Density proportional to `(x - a)^alpha (b - x)^beta` on `[a, b]`.
    Beta { a: f64, b: f64, alpha: f64, beta: f64 },
}

impl Distribution {
    pub fn uniform(a: f64, b: f64) -> Result<Self, UqError> {
        Self::Uniform { a, b }.checked()
    }

    pub fn normal(mu: f64, sigma: f64) -> Result<Self, UqError> {
        Self::Normal { mu, sigma }.checked()
    }

    pub fn triangular(a: f64, b: f64) -> Result<Self, UqError> {
        Self::Triangular { a, b }.checked()
    }

    pub fn beta(a: f64, b: f64, alpha: f64, beta: f64) -> Result<Self, UqError> {
        Self::Beta { a, b, alpha, beta }.checked()
    }

    fn checked(self) -> Result<Self, UqError> {
        let bad = |msg: String| Err(UqError::InvalidArgument(msg));
        match self {
            Self::Uniform { a, b } | Self::Triangular { a, b } | Self::Beta { a, b, .. }
                if !(a.is_finite() && b.is_finite() && a < b) =>
            {
                bad(format!("{self}: need finite a < b"))
            }
            Self::Normal { mu, sigma } if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) => {
                bad(format!("{self}: need finite mu and sigma > 0"))
            }
            // negative exponents give an unbounded density, which no
            // uniform envelope can cover
            Self::Beta { alpha, beta, .. } if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) => {
                bad(format!("{self}: need finite alpha, beta >= 0"))
            }
            _ => Ok(self),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform { .. } => "uniform",
            Self::Normal { .. } => "normal",
            Self::Triangular { .. } => "triangular",
            Self::Beta { .. } => "beta",
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            Self::Normal { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Self::Uniform { a, b } | Self::Triangular { a, b } | Self::Beta { a, b, .. } => (a, b),
        }
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        match *self {
            Self::Uniform { a, b } => {
                if (a..=b).contains(&x) {
                    -(b - a).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Self::Normal { mu, sigma } => {
                let z = (x - mu) / sigma;
                -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
            }
            Self::Triangular { a, b } => {
                if !(a < x && x < b) {
                    return f64::NEG_INFINITY;
                }
                let half = 0.5 * (b - a);
                let rise = half - (x - 0.5 * (a + b)).abs();
                (rise / (half * half)).ln()
            }
            Self::Beta { a, b, alpha, beta } => {
                if !(a < x && x < b) {
                    return f64::NEG_INFINITY;
                }
                let norm = ln_gamma(alpha + beta + 2.0) - ln_gamma(alpha + 1.0) - ln_gamma(beta + 1.0)
                    - (alpha + beta + 1.0) * (b - a).ln();
                norm + alpha * (x - a).ln() + beta * (b - x).ln()
            }
        }
    }

    /// Quantile function; `None` for kinds sampled by rejection.
    pub fn inverse_cdf(&self, u: f64) -> Option<f64> {
        match *self {
            Self::Uniform { a, b } => Some(a + (b - a) * u),
            Self::Normal { mu, sigma } => {
                let n = StatrsNormal::new(mu, sigma).ok()?;
                Some(n.inverse_cdf(u))
            }
            Self::Triangular { a, b } => {
                let w = b - a;
                Some(if u < 0.5 {
                    a + w * (0.5 * u).sqrt()
                } else {
                    b - w * (0.5 * (1.0 - u)).sqrt()
                })
            }
            Self::Beta { .. } => None,
        }
    }

    pub fn has_inverse_cdf(&self) -> bool {
        !matches!(self, Self::Beta { .. })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64, UqError> {
        match *self {
            Self::Normal { mu, sigma } => {
                let z: f64 = rng.sample(StandardNormal);
                Ok(mu + sigma * z)
            }
            Self::Beta { a, b, alpha, beta } => {
                let mode = a + (b - a) * if alpha + beta > 0.0 { alpha / (alpha + beta) } else { 0.5 };
                let shape = |x: f64| alpha * (x - a).ln() + beta * (b - x).ln();
                let log_max = shape(mode);
                for _ in 0..REJECTION_CAP {
                    let x = a + (b - a) * rng.random::<f64>();
                    let u: f64 = rng.random();
                    if u.ln() + log_max <= shape(x) {
                        return Ok(x);
                    }
                }
                Err(UqError::RejectionCap(REJECTION_CAP))
            }
            _ => {
                let u: f64 = rng.random();
                Ok(self.inverse_cdf(u).expect("closed-form quantile"))
            }
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform { a, b } => write!(f, "uniform:{a},{b}"),
            Self::Normal { mu, sigma } => write!(f, "normal:{mu},{sigma}"),
            Self::Triangular { a, b } => write!(f, "triangular:{a},{b}"),
            Self::Beta { a, b, alpha, beta } => write!(f, "beta:{a},{b},{alpha},{beta}"),
        }
    }
}

/// Parses `uniform:a,b`, `normal:mu,sigma`, `triangular:a,b` and
/// `beta:a,b,alpha,beta`.
impl FromStr for Distribution {
    type Err = UqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || UqError::InvalidArgument(format!("cannot parse distribution '{s}'"));
        let (kind, args) = s.split_once(':').ok_or_else(bad)?;
        let args: Vec<f64> = args
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad())?;
        match (kind.trim().to_ascii_lowercase().as_str(), args.as_slice()) {
            ("uniform", &[a, b]) => Self::uniform(a, b),
            ("normal", &[mu, sigma]) => Self::normal(mu, sigma),
            ("triangular", &[a, b]) => Self::triangular(a, b),
            ("beta", &[a, b, alpha, beta]) => Self::beta(a, b, alpha, beta),
            _ => Err(bad()),
        }
    }
}

/// Independent components, one per model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProductDistribution {
    pub components: Vec<Distribution>,
}

impl ProductDistribution {
    pub fn new(components: Vec<Distribution>) -> Result<Self, UqError> {
        if components.is_empty() {
            return Err(UqError::InvalidArgument("product distribution needs at least one component".into()));
        }
        Ok(Self { components })
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>, UqError> {
        self.components.iter().map(|c| c.sample(rng)).collect()
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        if x.len() != self.dim() {
            return f64::NEG_INFINITY;
        }
        self.components.iter().zip(x).map(|(c, &xi)| c.log_pdf(xi)).sum()
    }

    /// Errors on the first component without a quantile function.
    pub fn check_invertible(&self) -> Result<(), UqError> {
        match self.components.iter().find(|c| !c.has_inverse_cdf()) {
            Some(c) => Err(UqError::NoInverseCdf(c.to_string())),
            None => Ok(()),
        }
    }

    /// Maps a point of the open unit cube component-wise through the
    /// quantile functions.
    pub fn inverse_cdf(&self, u: &[f64]) -> Result<Vec<f64>, UqError> {
        self.components
            .iter()
            .zip(u)
            .map(|(c, &ui)| c.inverse_cdf(ui).ok_or_else(|| UqError::NoInverseCdf(c.to_string())))
            .collect()
    }
}

impl From<Distribution> for ProductDistribution {
    fn from(d: Distribution) -> Self {
        Self { components: vec![d] }
    }
}
