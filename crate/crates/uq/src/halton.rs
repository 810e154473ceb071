//! Halton low-discrepancy points.

/// The first `n` primes.
pub fn primes(n: usize) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::with_capacity(n);
    let mut k = 2u64;
    while out.len() < n {
        if out.iter().take_while(|&&p| p * p <= k).all(|&p| k % p != 0) {
            out.push(k);
        }
        k += 1;
    }
    out
}

/// Van der Corput radical inverse of `k` in `base`.
pub fn radical_inverse(mut k: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut scale = inv;
    let mut x = 0.0;
    while k > 0 {
        x += (k % base) as f64 * scale;
        k /= base;
        scale *= inv;
    }
    x
}

/// `n` Halton points in `dim` dimensions. Component `i` uses the `i`-th
/// prime as base. The sequence starts at index 1, so the origin is never
/// produced and every coordinate lies in the open unit interval.
pub fn halton(n: usize, dim: usize) -> Vec<Vec<f64>> {
    let bases = primes(dim);
    (1..=n as u64)
        .map(|k| bases.iter().map(|&b| radical_inverse(k, b)).collect())
        .collect()
}
