use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityGateResult {
    pub pass: bool,
    pub point_estimate: f64,
    pub lower_bound: f64,
    pub confidence: f64,
    pub threshold: f64,
    pub n: usize,
}

/// Two-sided normal quantile for the given confidence level.
pub fn z_for_confidence(confidence: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - (1.0 - confidence) / 2.0)
}

/// Lower end of the Wilson score interval for `passes` out of `n`.
pub fn wilson_lower_bound(passes: usize, n: usize, confidence: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n_f = n as f64;
    let p = passes as f64 / n_f;
    let z = z_for_confidence(confidence);
    let z2 = z * z;
    let centre = p + z2 / (2.0 * n_f);
    let spread = z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    ((centre - spread) / (1.0 + z2 / n_f)).clamp(0.0, p)
}

/// Gate over per-instance pass/fail outcomes. Panics on an empty list or a
/// confidence outside (0, 1).
pub fn quality_gate(outcomes: &[bool], threshold: f64, confidence: f64) -> QualityGateResult {
    assert!(!outcomes.is_empty(), "quality gate needs at least one outcome");
    assert!(confidence > 0.0 && confidence < 1.0, "confidence must be in (0, 1)");
    let passes = outcomes.iter().filter(|&&b| b).count();
    let n = outcomes.len();
    let lower_bound = wilson_lower_bound(passes, n, confidence);
    QualityGateResult { pass: lower_bound >= threshold, point_estimate: passes as f64 / n as f64, lower_bound, confidence, threshold, n }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn z_at_95() {
        assert!((z_for_confidence(0.95) - 1.959964).abs() < 1e-6);
    }

    #[test]
    fn all_pass_of_twenty() {
        let g = quality_gate(&[true; 20], 0.5, 0.95);
        assert!(g.pass);
        assert!((g.lower_bound - 0.8389).abs() < 1e-4, "{}", g.lower_bound);
    }

    #[test]
    fn none_pass_fails() {
        let g = quality_gate(&[false; 20], 0.5, 0.95);
        assert!(!g.pass);
        assert_eq!(g.point_estimate, 0.0);
    }

    #[test]
    fn zero_threshold_always_passes() {
        assert!(quality_gate(&[false; 7], 0.0, 0.99).pass);
    }

    proptest! {
        #[test]
        fn lower_bound_below_estimate(n in 1usize..500, frac in 0.0f64..=1.0, conf in 0.5f64..0.999) {
            let passes = ((n as f64) * frac).floor() as usize;
            let lb = wilson_lower_bound(passes, n, conf);
            prop_assert!(lb <= passes as f64 / n as f64);
            prop_assert!(lb >= 0.0);
        }
    }
}
