#![allow(dead_code)]

/// Composite Simpson rule with `intervals` (even) subintervals.
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, intervals: usize) -> f64 {
    assert!(intervals % 2 == 0);
    let h = (b - a) / intervals as f64;
    let mut s = f(a) + f(b);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + h * i as f64);
    }
    s * h / 3.0
}

/// Tensor-product Simpson rule over a rectangle.
pub fn simpson2<F: Fn(f64, f64) -> f64>(f: F, x: (f64, f64), y: (f64, f64), intervals: usize) -> f64 {
    simpson(|u| simpson(|v| f(u, v), y.0, y.1, intervals), x.0, x.1, intervals)
}

/// Mean, variance and fourth central moment of an unnormalised 1-D density
/// on `[a, b]`.
pub fn moments<F: Fn(f64) -> f64 + Copy>(pdf: F, a: f64, b: f64) -> (f64, f64, f64) {
    let n = 4000;
    let z = simpson(pdf, a, b, n);
    let m = simpson(|x| x * pdf(x), a, b, n) / z;
    let v = simpson(|x| (x - m).powi(2) * pdf(x), a, b, n) / z;
    let m4 = simpson(|x| (x - m).powi(4) * pdf(x), a, b, n) / z;
    (m, v, m4)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of a correlated series' mean from non-overlapping batch
/// means.
pub fn batch_stderr(xs: &[f64], batches: usize) -> f64 {
    let len = xs.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| mean(&xs[b * len..(b + 1) * len])).collect();
    (variance(&means) / batches as f64).sqrt()
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
