//! Central finite differences, the independent oracle used to validate every
//! analytic gradient in the workspace.

use crate::error::Result;

/// Central-difference gradient of a scalar function at `x` with half-step `h`.
///
/// Each coordinate is perturbed in isolation: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_diff_grad(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let hi = f(&probe)?;
        probe[i] = x[i] - h;
        let lo = f(&probe)?;
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * h);
    }
    Ok(grad)
}
