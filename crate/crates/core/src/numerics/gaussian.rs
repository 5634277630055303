//! Diagonal-Gaussian primitives: the reparameterized sample and the
//! closed-form KL divergence, both as tape ops and as plain-f64 helpers.

use crate::error::{CoreError, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, VarId};

/// Draws `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)`; differentiable
/// with respect to both `mu` and `logvar`.
pub fn reparam_sample(tape: &mut Tape, mu: VarId, logvar: VarId, rng: &mut Rng) -> Result<VarId> {
    let n = tape.value(mu)?.len();
    if tape.value(logvar)?.len() != n {
        return Err(CoreError::shape(format!(
            "reparam_sample: mu has {n} elements, logvar has {}",
            tape.value(logvar)?.len()
        )));
    }
    let eps = tape.constant_vec(rng.normal_vec(n))?;
    let half = tape.scale(logvar, 0.5)?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, eps)?;
    tape.add(mu, noise)
}

/// KL(q || p) between diagonal Gaussians given as (mean, logvar) nodes, summed
/// over dimensions into a single-element node.
pub fn gaussian_kl(
    tape: &mut Tape,
    q_mu: VarId,
    q_logvar: VarId,
    p_mu: VarId,
    p_logvar: VarId,
) -> Result<VarId> {
    // 0.5 * sum(p_lv - q_lv + exp(q_lv - p_lv) + (q_mu - p_mu)^2 exp(-p_lv) - 1)
    let lv_diff = tape.sub(q_logvar, p_logvar)?;
    let var_ratio = tape.exp(lv_diff)?;
    let mu_diff = tape.sub(q_mu, p_mu)?;
    let mu_sq = tape.square(mu_diff)?;
    let neg_plv = tape.neg(p_logvar)?;
    let inv_pvar = tape.exp(neg_plv)?;
    let maha = tape.mul(mu_sq, inv_pvar)?;
    let lv_term = tape.sub(p_logvar, q_logvar)?;
    let s = tape.add(lv_term, var_ratio)?;
    let s = tape.add(s, maha)?;
    let s = tape.add_const(s, -1.0)?;
    let total = tape.sum(s)?;
    tape.scale(total, 0.5)
}

/// Plain-f64 closed form of the same divergence.
pub fn gaussian_kl_value(q_mu: &[f64], q_lv: &[f64], p_mu: &[f64], p_lv: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..q_mu.len() {
        acc += p_lv[i] - q_lv[i] + (q_lv[i] - p_lv[i]).exp()
            + (q_mu[i] - p_mu[i]).powi(2) * (-p_lv[i]).exp()
            - 1.0;
    }
    0.5 * acc
}
