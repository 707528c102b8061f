use crate::error::{Error, Result};
use crate::numerics::{sample_categorical, sample_weights, ProbVector, SeededRng};
use crate::target::TokenId;

/// Residual mass below which rejection is treated as impossible.
pub const RESIDUAL_EPS: f64 = 1e-12;

/// `min(1, p_target[token] / p_draft[token])`.
pub fn acceptance_probability(
    p_target: &ProbVector,
    p_draft: &ProbVector,
    token: TokenId,
) -> Result<f64> {
    if p_target.len() != p_draft.len() {
        return Err(Error::ShapeMismatch {
            op: "acceptance_probability",
            left: (1, p_target.len()),
            right: (1, p_draft.len()),
        });
    }
    if token >= p_draft.len() {
        return Err(Error::TokenOutOfRange {
            token,
            vocab: p_draft.len(),
        });
    }
    let pd = p_draft.get(token);
    if pd <= 0.0 {
        return Err(Error::ZeroDraftProbability(token));
    }
    Ok((p_target.get(token) / pd).min(1.0))
}

/// Accepts `token` with probability [`acceptance_probability`]. Always
/// consumes exactly one uniform draw.
pub fn accept_or_reject(
    p_target: &ProbVector,
    p_draft: &ProbVector,
    token: TokenId,
    rng: &mut SeededRng,
) -> Result<(bool, f64)> {
    let a = acceptance_probability(p_target, p_draft, token)?;
    Ok((rng.uniform() < a, a))
}

/// `normalize(max(0, p_target − p_draft))`, or `None` when the positive
/// part has less than [`RESIDUAL_EPS`] mass.
pub fn residual_distribution(p_target: &ProbVector, p_draft: &ProbVector) -> Option<ProbVector> {
    let w: Vec<f64> = p_target
        .probs()
        .iter()
        .zip(p_draft.probs())
        .map(|(t, d)| (t - d).max(0.0))
        .collect();
    if w.iter().sum::<f64>() < RESIDUAL_EPS {
        return None;
    }
    ProbVector::from_weights(w).ok()
}

/// Samples the replacement for a rejected token. Falls back to `p_target`
/// when the residual vanishes, which only happens if the two laws coincide.
pub fn residual_sample(
    p_target: &ProbVector,
    p_draft: &ProbVector,
    rng: &mut SeededRng,
) -> Result<TokenId> {
    if p_target.len() != p_draft.len() {
        return Err(Error::ShapeMismatch {
            op: "residual_sample",
            left: (1, p_target.len()),
            right: (1, p_draft.len()),
        });
    }
    match residual_distribution(p_target, p_draft) {
        Some(r) => sample_weights(r.probs(), rng),
        None => sample_categorical(p_target, rng),
    }
}
