//! Small order-statistic helpers shared by inference and verification.

/// Inverted empirical CDF: the `⌈τn⌉`-th smallest value (1-based), clamped
/// to `[1, n]`. With `n` samples, every `τ > (n-1)/n` returns the maximum.
pub fn empirical_quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "empirical quantile of an empty sample");
    let rank = ((tau * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

pub fn empirical_quantile(values: &[f64], tau: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    empirical_quantile_sorted(&v, tau)
}

/// Lower median (`τ = 0.5` under [`empirical_quantile`]).
pub fn median(values: &[f64]) -> f64 {
    empirical_quantile(values, 0.5)
}

/// Smallest value whose cumulative weight reaches half the total: a
/// minimizer of `Σ w_i |y_i - c|`.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(values.len(), weights.len());
    assert!(!values.is_empty(), "weighted median of an empty sample");
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i];
        if acc >= 0.5 * total {
            return values[i];
        }
    }
    values[idx[idx.len() - 1]]
}
