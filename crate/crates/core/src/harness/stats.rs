//! Binomial standard-error bands.

/// sqrt(p(1-p)/n).
pub fn standard_error(p: f64, n: u64) -> f64 {
    if n == 0 {
        return f64::INFINITY;
    }
    (p * (1.0 - p) / n as f64).sqrt()
}

/// |p_hat - p| <= k * sqrt(p(1-p)/n), with the analytic p in the SE. At
/// p = 0 or 1 the band degenerates to exact equality.
pub fn standard_error_band(p_hat: f64, n: u64, p: f64, k_sigma: f64) -> bool {
    (p_hat - p).abs() <= k_sigma * standard_error(p, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_is_inside() {
        assert!(standard_error_band(0.3, 100, 0.3, 3.0));
    }

    #[test]
    fn hand_case_outside() {
        // |0.7 - 0.5| = 0.2 > 3 * 0.05 = 0.15
        assert!(!standard_error_band(0.7, 100, 0.5, 3.0));
    }

    #[test]
    fn zero_variance_degenerates_to_equality() {
        assert!(standard_error_band(0.0, 1000, 0.0, 3.0));
        assert!(!standard_error_band(0.001, 1000, 0.0, 3.0));
        assert!(standard_error_band(1.0, 1000, 1.0, 3.0));
    }
}
