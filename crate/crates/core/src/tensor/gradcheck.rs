use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` at `x`:
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}
