use crate::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// Gradient with respect to the pre-softmax logits: `pred - onehot(label)`.
    pub grad_logits: Vec<f64>,
    /// Set when `pred[label]` was below [`PROB_FLOOR`].
    pub clamped: bool,
}

/// Cross-entropy of a probability vector against a class index.
pub fn loss_cross_entropy(pred: &[f64], label: usize) -> Result<CrossEntropy> {
    if label >= pred.len() {
        return Err(Error::Data(format!(
            "label {label} out of range for {} classes",
            pred.len()
        )));
    }
    let sum: f64 = pred.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Data(format!("prediction sums to {sum}, not 1")));
    }
    let p = pred[label];
    let clamped = p < PROB_FLOOR;
    let loss = -p.max(PROB_FLOOR).ln();
    let mut grad_logits = pred.to_vec();
    grad_logits[label] -= 1.0;
    Ok(CrossEntropy {
        loss,
        grad_logits,
        clamped,
    })
}

/// Huber loss of `e = y_true - y_pred` and its derivative with respect to `y_pred`.
///
/// `0.5 e^2` for `|e| <= delta`, `delta |e| - 0.5 delta^2` otherwise.
pub fn loss_huber(y_true: f64, y_pred: f64, delta: f64) -> (f64, f64) {
    debug_assert!(delta > 0.0);
    let e = y_true - y_pred;
    if e.abs() <= delta {
        (0.5 * e * e, -e)
    } else {
        (delta * e.abs() - 0.5 * delta * delta, -delta * e.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_prediction() {
        let ce = loss_cross_entropy(&[0.1; 10], 4).unwrap();
        assert!((ce.loss - 10f64.ln()).abs() < 1e-12);
        assert!((ce.loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn perfect_prediction() {
        let ce = loss_cross_entropy(&[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert_eq!(ce.grad_logits, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let ce = loss_cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!(ce.clamped);
        assert!((ce.loss - 1e-12f64.ln().abs()).abs() < 1e-9);
    }

    #[test]
    fn unnormalised_prediction_rejected() {
        assert!(loss_cross_entropy(&[0.5, 0.6], 0).is_err());
    }

    #[test]
    fn huber_regions() {
        assert_eq!(loss_huber(0.5, 0.0, 1.0).0, 0.125);
        assert_eq!(loss_huber(2.0, 0.0, 1.0).0, 1.5);
        assert_eq!(loss_huber(1.0, 0.0, 1.0).0, 0.5);
        assert_eq!(loss_huber(0.0, 1.0, 1.0).0, 0.5);
    }

    #[test]
    fn huber_is_c1_at_delta() {
        for delta in [0.5, 1.0, 3.0] {
            for sign in [1.0, -1.0] {
                let e = sign * delta;
                let eps = 1e-9;
                let (inside, g_in) = loss_huber(e - sign * eps, 0.0, delta);
                let (outside, g_out) = loss_huber(e + sign * eps, 0.0, delta);
                assert!((inside - outside).abs() < 1e-8);
                // d/dy_pred = -d/de, so both one-sided slopes equal -delta*sign(e).
                assert!((g_in + delta * sign).abs() < 1e-8);
                assert!((g_out + delta * sign).abs() < 1e-12);
            }
        }
    }
}
