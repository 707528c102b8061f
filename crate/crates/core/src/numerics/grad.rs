use crate::error::{Error, Result};

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidConfig(format!("finite-difference step {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}
