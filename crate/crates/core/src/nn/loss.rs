use super::BCE_EPS;
use crate::{Error, Result};

/// Binary cross-entropy over predictions and (possibly soft) targets in [0,1].
///
/// Predictions are clamped to `[eps, 1-eps]` before the log, so boundary
/// predictions stay finite. With soft targets the minimum is the target's
/// Bernoulli entropy, not zero.
pub fn loss_bce(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch {
            expected: targets.len(),
            got: predictions.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::EmptyInput("loss over empty batch".into()));
    }
    let mut sum = 0.0;
    for (&p, &y) in predictions.iter().zip(targets) {
        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(sum / predictions.len() as f64)
}

/// d(BCE)/d(prediction) per sample, matching [`loss_bce`] exactly (including
/// the clamp, whose outside region has zero slope).
pub(super) fn loss_bce_grad(predictions: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = predictions.len() as f64;
    predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
                return 0.0;
            }
            (p - y) / (p * (1.0 - p)) / n
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_prediction_of_true_target_is_ln2() {
        let l = loss_bce(&[0.5], &[1.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{l}");
    }

    #[test]
    fn soft_target_floor_is_bernoulli_entropy() {
        // H(0.3) = -0.3 ln 0.3 - 0.7 ln 0.7
        let expected = -(0.3f64 * 0.3f64.ln() + 0.7 * 0.7f64.ln());
        let l = loss_bce(&[0.3], &[0.3]).unwrap();
        assert!((l - expected).abs() < 1e-12);
        assert!((expected - 0.6109).abs() < 1e-4);
    }

    #[test]
    fn boundary_prediction_stays_finite() {
        let l = loss_bce(&[1.0 - 1e-7], &[1.0]).unwrap();
        assert!(l.is_finite());
        assert!(l < 2e-7 && l > 0.0);
        // Even an exact 1.0 is clamped.
        assert!(loss_bce(&[1.0], &[1.0]).unwrap().is_finite());
    }

    #[test]
    fn zero_iff_exact_hard_match() {
        let l = loss_bce(&[1.0 - 1e-7, 1e-7], &[1.0, 0.0]).unwrap();
        assert!(l > 0.0 && l < 1e-6);
        let mismatch = loss_bce(&[0.4], &[0.0]).unwrap();
        assert!(mismatch > 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(loss_bce(&[0.5, 0.5], &[1.0]).is_err());
    }
}
