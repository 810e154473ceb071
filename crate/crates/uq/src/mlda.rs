//! Multilevel delayed acceptance.
//!
//! Levels are ordered coarse to fine. The coarsest level runs random-walk
//! Metropolis. A step on level `l >= 1` runs the level `l - 1` sampler for
//! `subsampling[l - 1]` steps starting from the current state and offers its
//! final state `y` as the proposal, accepted with probability
//!
//! ```text
//! min(1, pi_l(y) pi_{l-1}(x) / (pi_l(x) pi_{l-1}(y)))
//! ```
//!
//! The level `l - 1` chain is reversible with respect to `pi_{l-1}`, so its
//! `n`-step kernel `K` satisfies `pi_{l-1}(x) K(x, y) = pi_{l-1}(y) K(y, x)`.
//! Using `K` as the proposal for a Metropolis-Hastings step targeting `pi_l`
//! gives the ratio `pi_l(y) K(y, x) / (pi_l(x) K(x, y))`, which reduces to
//! the expression above. Each level therefore leaves its own density
//! invariant, and the finest chain targets the finest density.
//!
//! Densities already known at a state are reused, so one fine step costs one
//! fine evaluation, `subsampling[L-1]` evaluations on level `L - 1`,
//! `subsampling[L-1] * subsampling[L-2]` on level `L - 2` and so on. Each
//! chain also evaluates every level once at the starting point.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::mcmc::{check_sigma, run_chain, ChainError, ChainResult, LevelTrace, LogDensity};
use crate::UqError;

#[derive(Clone)]
pub struct MldaHierarchy {
    pub levels: Vec<Arc<dyn LogDensity>>,
    /// `subsampling[l]` level-`l` steps make one proposal for level `l + 1`.
    pub subsampling: Vec<usize>,
    /// Random-walk step size per component on the coarsest level.
    pub proposal_sigma: Vec<f64>,
}

impl MldaHierarchy {
    pub fn new(
        levels: Vec<Arc<dyn LogDensity>>,
        subsampling: Vec<usize>,
        proposal_sigma: Vec<f64>,
    ) -> Result<Self, UqError> {
        if levels.is_empty() {
            return Err(UqError::InvalidArgument("hierarchy needs at least one level".into()));
        }
        if subsampling.len() + 1 != levels.len() {
            return Err(UqError::InvalidArgument(format!(
                "{} levels need {} subsampling rates, got {}",
                levels.len(),
                levels.len() - 1,
                subsampling.len()
            )));
        }
        if subsampling.contains(&0) {
            return Err(UqError::InvalidArgument("subsampling rates must be at least 1".into()));
        }
        Ok(Self { levels, subsampling, proposal_sigma })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Evaluations per level for one chain that completes `n_fine` fine
    /// transitions, including the evaluation at the starting point.
    pub fn expected_evaluations(&self, n_fine: usize) -> Vec<u64> {
        let mut per_step = vec![1u64; self.levels.len()];
        for l in (0..self.subsampling.len()).rev() {
            per_step[l] = per_step[l + 1] * self.subsampling[l] as u64;
        }
        per_step.iter().map(|&k| k * n_fine as u64 + 1).collect()
    }
}

/// Runs `chains` independent chains of `n_fine` fine transitions each (so
/// every chain holds `n_fine + 1` fine samples including `theta0`), at most
/// `parallelism` at a time. Chain `i` draws from stream `i` of `seed`, so
/// chain 0 of a single-level hierarchy reproduces [`crate::rwm`] exactly.
///
/// A chain whose density is not finite, or whose evaluation fails, stops
/// there with `aborted` set; the other chains carry on.
pub fn mlda(
    h: &MldaHierarchy,
    theta0: &[f64],
    n_fine: usize,
    chains: usize,
    seed: u64,
    parallelism: usize,
) -> Result<Vec<ChainResult>, UqError> {
    if chains == 0 {
        return Err(UqError::InvalidArgument("need at least one chain".into()));
    }
    check_sigma(&h.proposal_sigma, theta0.len())?;
    let levels: Vec<&dyn LogDensity> = h.levels.iter().map(|l| l.as_ref()).collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<ChainResult>>> = Mutex::new(vec![None; chains]);
    std::thread::scope(|s| {
        for _ in 0..parallelism.clamp(1, chains) {
            s.spawn(|| loop {
                let chain = next.fetch_add(1, Ordering::Relaxed);
                if chain >= chains {
                    break;
                }
                let result = match run_chain(&levels, &h.subsampling, &h.proposal_sigma, theta0, n_fine, seed, chain) {
                    Ok(r) => r,
                    Err(ChainError::Start(e)) => ChainResult {
                        chain,
                        levels: vec![LevelTrace::default(); levels.len()],
                        aborted: Some(format!("at the starting point: {e}")),
                    },
                };
                results.lock().unwrap()[chain] = Some(result);
            });
        }
    });
    Ok(results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every chain ran"))
        .collect())
}

/// Fine-level samples of all chains that ran to completion, in chain order.
pub fn pooled_samples(results: &[ChainResult]) -> Vec<Vec<f64>> {
    results
        .iter()
        .filter(|r| r.aborted.is_none())
        .flat_map(|r| r.samples().iter().cloned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rwm;

    fn gauss(theta: &[f64]) -> f64 {
        -0.5 * theta.iter().map(|x| x * x).sum::<f64>()
    }

    fn levels(n: usize) -> Vec<Arc<dyn LogDensity>> {
        (0..n)
            .map(|l| {
                let shift = 0.1 * l as f64;
                Arc::new(move |t: &[f64]| -0.5 * t.iter().map(|x| (x - shift).powi(2)).sum::<f64>())
                    as Arc<dyn LogDensity>
            })
            .collect()
    }

    #[test]
    fn hierarchy_validation() {
        assert!(MldaHierarchy::new(vec![], vec![], vec![1.0]).is_err());
        assert!(MldaHierarchy::new(levels(2), vec![], vec![1.0]).is_err());
        assert!(MldaHierarchy::new(levels(2), vec![0], vec![1.0]).is_err());
        assert!(MldaHierarchy::new(levels(3), vec![25, 2], vec![1.0]).is_ok());
    }

    #[test]
    fn expected_counts() {
        let h = MldaHierarchy::new(levels(3), vec![25, 2], vec![1.0]).unwrap();
        assert_eq!(h.expected_evaluations(10), vec![501, 21, 11]);
    }

    #[test]
    fn single_level_is_rwm() {
        let g: Arc<dyn LogDensity> = Arc::new(gauss);
        let h = MldaHierarchy::new(vec![g], vec![], vec![0.8, 0.8]).unwrap();
        let chains = mlda(&h, &[0.1, 0.2], 99, 1, 17, 1).unwrap();
        let direct = rwm(&gauss, &[0.1, 0.2], &[0.8, 0.8], 100, 17).unwrap();
        assert_eq!(chains[0], direct);
    }

    #[test]
    fn start_failure_is_per_chain() {
        let bad: Arc<dyn LogDensity> = Arc::new(|_: &[f64]| f64::NAN);
        let h = MldaHierarchy::new(vec![bad], vec![], vec![1.0]).unwrap();
        let r = mlda(&h, &[0.0], 5, 3, 1, 2).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.iter().all(|c| c.aborted.is_some()));
        assert!(pooled_samples(&r).is_empty());
    }

    #[test]
    fn parallelism_does_not_change_results() {
        let h = MldaHierarchy::new(levels(3), vec![3, 2], vec![1.0, 1.0]).unwrap();
        let a = mlda(&h, &[0.0, 0.0], 20, 5, 8, 1).unwrap();
        let b = mlda(&h, &[0.0, 0.0], 20, 5, 8, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].samples(), a[1].samples());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(40))]

        #[test]
        fn counters_follow_subsampling(
            depth in 1usize..4,
            rates in proptest::collection::vec(1usize..5, 3),
            n in 0usize..15,
            seed in 0u64..1000,
        ) {
            let h = MldaHierarchy::new(levels(depth), rates[..depth - 1].to_vec(), vec![0.7]).unwrap();
            let r = mlda(&h, &[0.3], n, 2, seed, 2).unwrap();
            for c in &r {
                proptest::prop_assert!(c.aborted.is_none());
                proptest::prop_assert_eq!(c.evaluations_per_level(), h.expected_evaluations(n));
                proptest::prop_assert_eq!(c.samples().len(), n + 1);
                for l in &c.levels {
                    proptest::prop_assert!((0.0..=1.0).contains(&l.acceptance_rate()));
                    proptest::prop_assert_eq!(l.samples.len() as u64, l.proposed + 1);
                }
            }
        }

        #[test]
        fn identical_levels_reduce_to_rwm(seed in 0u64..10_000, n in 1usize..100, s in 0.0f64..4.0) {
            let g: Arc<dyn LogDensity> = Arc::new(gauss);
            let h = MldaHierarchy::new(vec![g.clone(), g], vec![1], vec![s, s]).unwrap();
            let chains = mlda(&h, &[1.0, -1.0], n - 1, 1, seed, 1).unwrap();
            let direct = rwm(&gauss, &[1.0, -1.0], &[s, s], n, seed).unwrap();
            let bits = |v: &[Vec<f64>]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
            proptest::prop_assert_eq!(bits(chains[0].samples()), bits(direct.samples()));
            proptest::prop_assert_eq!(chains[0].levels[1].accepted, chains[0].levels[1].proposed);
        }
    }
}
