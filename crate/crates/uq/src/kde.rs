//! One-dimensional Gaussian kernel density estimation.

use std::f64::consts::PI;
use std::str::FromStr;

use crate::UqError;

/// Kernels are cut off beyond this many bandwidths; the neglected mass is
/// below 1e-15 per sample.
const CUTOFF: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule of thumb.
    Auto,
    Fixed(f64),
}

impl FromStr for Bandwidth {
    type Err = UqError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Self::Auto);
        }
        match s.parse::<f64>() {
            Ok(h) if h > 0.0 && h.is_finite() => Ok(Self::Fixed(h)),
            _ => Err(UqError::InvalidArgument(format!("bandwidth must be 'auto' or a positive number, got '{s}'"))),
        }
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`, falling back to the standard
/// deviation alone when the interquartile range is zero.
pub fn silverman(samples: &[f64]) -> Result<f64, UqError> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    silverman_sorted(&sorted)
}

fn silverman_sorted(sorted: &[f64]) -> Result<f64, UqError> {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if sd == 0.0 {
        return Err(UqError::ZeroVariance);
    }
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * n.powf(-0.2))
}

#[derive(Debug, Clone)]
pub struct Kde {
    /// Sorted samples, log-transformed in positive mode.
    data: Vec<f64>,
    h: f64,
    positive: bool,
}

impl Kde {
    pub fn new(samples: &[f64], bandwidth: Bandwidth) -> Result<Self, UqError> {
        Self::build(samples.to_vec(), bandwidth, false)
    }

    /// Estimate for data known to be positive: the kernel sum is built on
    /// `ln x` and mapped back, so no mass leaks below zero. The bandwidth
    /// applies on the log scale.
    pub fn positive(samples: &[f64], bandwidth: Bandwidth) -> Result<Self, UqError> {
        if let Some(x) = samples.iter().find(|&&x| x <= 0.0) {
            return Err(UqError::InvalidArgument(format!("positive-support estimate got sample {x}")));
        }
        Self::build(samples.iter().map(|x| x.ln()).collect(), bandwidth, true)
    }

    fn build(mut data: Vec<f64>, bandwidth: Bandwidth, positive: bool) -> Result<Self, UqError> {
        if data.len() < 2 {
            return Err(UqError::InvalidArgument("density estimate needs at least two samples".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(UqError::InvalidArgument("samples must be finite".into()));
        }
        data.sort_by(f64::total_cmp);
        if data[0] == data[data.len() - 1] {
            return Err(UqError::ZeroVariance);
        }
        let h = match bandwidth {
            Bandwidth::Auto => silverman_sorted(&data)?,
            Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
            Bandwidth::Fixed(h) => return Err(UqError::InvalidArgument(format!("bandwidth {h} is not positive"))),
        };
        Ok(Self { data, h, positive })
    }

    pub fn bandwidth(&self) -> f64 {
        self.h
    }

    pub fn is_positive(&self) -> bool {
        self.positive
    }

    fn kernel_sum(&self, y: f64) -> f64 {
        let lo = self.data.partition_point(|&s| s < y - CUTOFF * self.h);
        let hi = self.data.partition_point(|&s| s <= y + CUTOFF * self.h);
        let sum: f64 = self.data[lo..hi]
            .iter()
            .map(|&s| {
                let z = (y - s) / self.h;
                (-0.5 * z * z).exp()
            })
            .sum();
        sum / (self.data.len() as f64 * self.h * (2.0 * PI).sqrt())
    }

    pub fn density(&self, x: f64) -> f64 {
        if !self.positive {
            return self.kernel_sum(x);
        }
        if x <= 0.0 {
            return 0.0;
        }
        self.kernel_sum(x.ln()) / x
    }

    /// `points` evaluation points covering the data plus five bandwidths on
    /// either side, with the density at each.
    pub fn grid(&self, points: usize) -> (Vec<f64>, Vec<f64>) {
        let points = points.max(2);
        let lo = self.data[0] - 5.0 * self.h;
        let hi = self.data[self.data.len() - 1] + 5.0 * self.h;
        let step = (hi - lo) / (points - 1) as f64;
        let xs: Vec<f64> = (0..points)
            .map(|i| {
                let y = lo + step * i as f64;
                if self.positive {
                    y.exp()
                } else {
                    y
                }
            })
            .collect();
        let ds = xs.iter().map(|&x| self.density(x)).collect();
        (xs, ds)
    }
}

/// Trapezoid rule over a (possibly uneven) grid.
pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2)
        .zip(ys.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_is_an_error() {
        assert!(matches!(Kde::new(&[0.0, 0.0], Bandwidth::Auto), Err(UqError::ZeroVariance)));
        assert!(matches!(Kde::new(&[1.0, 1.0, 1.0], Bandwidth::Fixed(0.1)), Err(UqError::ZeroVariance)));
        assert!(Kde::new(&[1.0], Bandwidth::Auto).is_err());
    }

    #[test]
    fn fixed_bandwidth_is_used_as_given() {
        let kde = Kde::new(&[0.0, 10.0], Bandwidth::Fixed(0.1)).unwrap();
        assert_eq!(kde.bandwidth(), 0.1);
        // far from the other sample the estimate is half a normal pdf of width 0.1
        let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * PI).sqrt();
        for x in [0.0, 0.05, -0.13] {
            let expected = 0.5 * phi(x / 0.1) / 0.1;
            assert!((kde.density(x) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn silverman_by_hand() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        // sd = sqrt(2.5), IQR = 2, min(sd, 2/1.34) = 1.4925...
        let expected = 0.9 * (2.0 / 1.34f64).min(2.5f64.sqrt()) * 5f64.powf(-0.2);
        assert!((silverman(&xs).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_parsing() {
        assert_eq!("auto".parse::<Bandwidth>().unwrap(), Bandwidth::Auto);
        assert_eq!("0.1".parse::<Bandwidth>().unwrap(), Bandwidth::Fixed(0.1));
        assert!("-1".parse::<Bandwidth>().is_err());
        assert!("wide".parse::<Bandwidth>().is_err());
    }

    #[test]
    fn positive_mode_has_no_mass_below_zero() {
        let xs: Vec<f64> = (1..200).map(|i| 0.01 * i as f64).collect();
        let kde = Kde::positive(&xs, Bandwidth::Auto).unwrap();
        assert_eq!(kde.density(-0.5), 0.0);
        assert_eq!(kde.density(0.0), 0.0);
        let (x, d) = kde.grid(2000);
        assert!(x[0] > 0.0);
        assert!((trapezoid(&x, &d) - 1.0).abs() < 1e-3);
        assert!(Kde::positive(&[1.0, -1.0], Bandwidth::Auto).is_err());
    }

    proptest::proptest! {
        #[test]
        fn grid_integrates_to_one(xs in proptest::collection::vec(-50.0f64..50.0, 2..60)) {
            proptest::prop_assume!(xs.iter().any(|&x| x != xs[0]));
            let kde = Kde::new(&xs, Bandwidth::Auto).unwrap();
            // resolve the narrowest kernel with several points
            let span = xs.iter().cloned().fold(f64::MIN, f64::max) - xs.iter().cloned().fold(f64::MAX, f64::min);
            let points = ((span / kde.bandwidth()) * 8.0).clamp(512.0, 200_000.0) as usize;
            let (x, d) = kde.grid(points);
            proptest::prop_assert!((trapezoid(&x, &d) - 1.0).abs() < 1e-3);
            proptest::prop_assert!(d.iter().all(|&v| v >= 0.0));
        }
    }
}
