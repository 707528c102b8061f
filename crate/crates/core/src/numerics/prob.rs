//! Probability vectors, temperature softmax and categorical sampling.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::SeededRng;
use crate::error::{Error, Result};

/// Tolerance on the total mass of a valid distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

/// A distribution over the vocabulary: nonnegative, summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::EmptyInput);
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("mass {total}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidDistribution("all-zero weights".into()));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Self(v)
    }

    pub fn uniform(len: usize) -> Self {
        Self(vec![1.0 / len as f64; len])
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn total_variation(&self, other: &ProbVector) -> f64 {
        0.5 * self
            .0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Softmax of `logits / temperature`; `temperature == 0` is the one-hot argmax.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<ProbVector> {
    if logits.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(temperature >= 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidConfig(format!("temperature {temperature}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    if temperature == 0.0 {
        return Ok(ProbVector::one_hot(logits.len(), argmax(logits)));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    Ok(ProbVector(out))
}

/// Row-wise temperature softmax.
pub fn softmax_rows(m: &Matrix, temperature: f64) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        let p = softmax(m.row(r), temperature)?;
        out.row_mut(r).copy_from_slice(p.probs());
    }
    Ok(out)
}

/// Draws an index with probability proportional to `weights` by inverse CDF
/// on a single uniform draw.
pub fn sample_weights(weights: &[f64], rng: &mut SeededRng) -> Result<usize> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidDistribution("negative or non-finite weight".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidDistribution("all-zero weights".into()));
    }
    let target = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
            acc += w;
            if target < acc {
                return Ok(i);
            }
        }
    }
    // Rounding can leave `target` just above the accumulated mass.
    Ok(last_positive)
}

pub fn sample_categorical(p: &ProbVector, rng: &mut SeededRng) -> Result<usize> {
    sample_weights(p.probs(), rng)
}
