//! Nearest-rank percentiles, the single percentile definition used across
//! thresholding, filtering, HD95 and size stratification.

/// 1-based nearest rank `ceil(p/100 * n)`, clamped to `[1, n]`.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    // Tolerance absorbs representation error such as 0.2 * 10 landing above 2.
    let raw = (p * n as f64 / 100.0 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n.max(1))
}

/// Percentile of already sorted (ascending) values.
pub fn of_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    Some(sorted[nearest_rank(p, sorted.len()) - 1])
}

pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    of_sorted(&v, p)
}
