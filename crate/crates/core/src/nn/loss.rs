use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Probabilities below this are clamped before taking the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropy<T> {
    pub loss: T,
    /// Gradient of the combined softmax + cross-entropy w.r.t. the logits.
    pub grad_logits: Vec<T>,
    /// The true-class probability fell below [`PROB_FLOOR`].
    pub clamped: bool,
}

pub fn cross_entropy<T: Scalar>(probs: &[T], true_label: usize) -> Result<CrossEntropy<T>> {
    if true_label >= probs.len() {
        return Err(Error::InvalidArgument(format!(
            "label {true_label} out of range for {} classes",
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().map(|p| p.widen()).sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::NotNormalized { sum });
    }
    let p = probs[true_label];
    let clamped = p.widen() < PROB_FLOOR;
    let loss = -p.max(T::of(PROB_FLOOR)).ln();
    let mut grad_logits = probs.to_vec();
    grad_logits[true_label] -= T::one();
    Ok(CrossEntropy {
        loss,
        grad_logits,
        clamped,
    })
}
