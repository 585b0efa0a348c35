use alloc::vec::Vec;

use crate::activation::{log_sum_exp, softmax};
use crate::error::{Error, Result};

/// `logsumexp(logits) - logits[label]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let loss = log_sum_exp(logits) - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Mean squared error over the target vector and its gradient.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            expected: (1, target.len()),
            actual: (1, pred.len()),
        });
    }
    let g = pred.len() as f64;
    let diff: Vec<f64> = pred.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|e| e * e).sum::<f64>() / g;
    let grad = diff.iter().map(|e| 2.0 * e / g).collect();
    Ok((loss, grad))
}
