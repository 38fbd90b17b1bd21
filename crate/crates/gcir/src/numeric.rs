//! Small numeric helpers shared across modules.

/// Pairwise (cascade) summation. Deterministic for a given slice regardless
/// of how the caller produced it, and far more accurate than a running sum
/// for long Monte Carlo reductions.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut s = 0.0;
        for v in values {
            s += v;
        }
        return s;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Sample mean via pairwise summation. Empty input gives 0.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Two-pass sample standard deviation (n-1 denominator); 0 for n < 2.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (pairwise_sum(&sq) / (n - 1) as f64).sqrt()
}

/// `n` equally spaced points from `a` to `b` inclusive. `n == 1` gives `[a]`.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let step = (b - a) / (n - 1) as f64;
    (0..n)
        .map(|i| if i == n - 1 { b } else { a + i as f64 * step })
        .collect()
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    if sxx == 0.0 || n < 2.0 {
        return (f64::NAN, my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_input() {
        let v = [1.0, 2.0, 3.5, -0.5];
        assert_eq!(pairwise_sum(&v), 6.0);
    }

    #[test]
    fn pairwise_is_length_stable() {
        let v: Vec<f64> = (0..10_001).map(|i| (i as f64).sin() * 1e-3).collect();
        let a = pairwise_sum(&v);
        let b = pairwise_sum(&v);
        assert_eq!(a, b);
    }

    #[test]
    fn linspace_endpoints_exact() {
        let v = linspace(0.5, 2.5, 5);
        assert_eq!(v[0], 0.5);
        assert_eq!(v[4], 2.5);
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn fit_recovers_exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v - 1.0).collect();
        let (s, b) = linear_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-12);
        assert!((b + 1.0).abs() < 1e-12);
    }

    #[test]
    fn std_of_constants_is_zero() {
        assert_eq!(sample_std(&[3.0; 100]), 0.0);
    }
}
