//! Loss kernels for draft training.

use super::matrix::Matrix;
use super::prob::ProbVector;
use crate::error::{Error, Result};

/// Lower clamp applied to predicted probabilities before taking logs.
pub const CE_CLAMP: f64 = 1e-12;

#[inline]
fn huber(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of the Smooth-L1 kernel with respect to its argument.
#[inline]
pub(crate) fn huber_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Elementwise-mean Smooth-L1 with the transition at `|x| = 1`.
pub fn smooth_l1(pred: &Matrix, target: &Matrix) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "smooth_l1",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    smooth_l1_slices(pred.data(), target.data())
}

pub(crate) fn smooth_l1_slices(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "smooth_l1",
            left: (1, pred.len()),
            right: (1, target.len()),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| huber(p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Soft-label cross-entropy `-Σ target·ln(max(pred, CE_CLAMP))`.
pub fn cross_entropy(pred: &ProbVector, target: &ProbVector) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            left: (1, pred.len()),
            right: (1, target.len()),
        });
    }
    Ok(-pred
        .probs()
        .iter()
        .zip(target.probs())
        .map(|(p, t)| t * p.max(CE_CLAMP).ln())
        .sum::<f64>())
}
