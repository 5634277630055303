//! Discrete noise schedule and the per-frame level ladder.
//!
//! Level `k` carries `x^k = sqrt(alpha_bar_k) x^0 + sqrt(1 - alpha_bar_k) eps`
//! with `alpha_bar_0 = 1` (clean data). Levels only ever decrease during
//! sampling, and jumps between them are deterministic given a clean-frame
//! prediction: the noise component implied at the current level is kept and
//! rescaled for the target level.

use crate::error::{CoreError, Result};
use crate::numerics::Rng;

/// Linear-beta schedule with precomputed cumulative signal fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    k_max: usize,
    betas: Vec<f64>,
    /// `alpha_bars[k]` for k in 0..=k_max; index 0 is 1.0 by convention.
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Per-step noise fraction at level `k` (1-based).
    pub fn beta(&self, k: usize) -> Result<f64> {
        if k == 0 || k > self.k_max {
            return Err(CoreError::contract(format!(
                "beta is defined for levels 1..={}, got {k}",
                self.k_max
            )));
        }
        Ok(self.betas[k - 1])
    }

    /// Cumulative signal fraction at level `k` (0 gives 1.0).
    pub fn alpha_bar(&self, k: usize) -> Result<f64> {
        self.alpha_bars.get(k).copied().ok_or_else(|| {
            CoreError::contract(format!("level {k} exceeds schedule depth {}", self.k_max))
        })
    }
}

/// Builds a `k_max`-level schedule with betas ramping linearly from `beta_min`
/// to `beta_max` (a single level uses `beta_min` alone).
pub fn make_schedule(k_max: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if k_max == 0 {
        return Err(CoreError::config("schedule needs at least one level"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(CoreError::config(format!(
            "beta range must satisfy 0 < min <= max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas: Vec<f64> = (0..k_max)
        .map(|i| {
            if k_max == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (k_max - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(k_max + 1);
    alpha_bars.push(1.0);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        k_max,
        betas,
        alpha_bars,
    })
}

/// The ascending ladder of target levels for a block: frame `i` (0-based)
/// settles at `levels[i]` when the block is noised causally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLevels {
    levels: Vec<usize>,
}

impl BlockLevels {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, frame: usize) -> usize {
        self.levels[frame]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.levels
    }
}

/// Assigns frame `i` of a `block_len` block the level `round((i+1) k_max /
/// block_len)`: evenly spaced, strictly increasing, ending at `k_max`.
pub fn causal_levels(block_len: usize, k_max: usize) -> Result<BlockLevels> {
    if block_len == 0 {
        return Err(CoreError::config("block length must be positive"));
    }
    if block_len > k_max {
        return Err(CoreError::config(format!(
            "block length {block_len} exceeds schedule depth {k_max}; levels would collide"
        )));
    }
    let levels: Vec<usize> = (1..=block_len)
        .map(|i| (i as f64 * k_max as f64 / block_len as f64).round() as usize)
        .collect();
    for w in levels.windows(2) {
        if w[1] <= w[0] {
            return Err(CoreError::contract(format!(
                "level ladder is not strictly increasing: {levels:?}"
            )));
        }
    }
    Ok(BlockLevels { levels })
}

/// Noises a clean frame to level `k`. Level 0 returns the frame unchanged
/// without consuming randomness.
pub fn forward_noise(
    x0: &[f64],
    k: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Ok(x0.to_vec());
    }
    let ab = schedule.alpha_bar(k)?;
    let signal = ab.sqrt();
    let noise = (1.0 - ab).sqrt();
    Ok(x0.iter().map(|&v| signal * v + noise * rng.normal()).collect())
}

/// Moves a frame from level `k_a` down to `k_b < k_a` deterministically: the
/// noise implied by `x0_hat` at the current level is kept and rescaled.
/// `k_b = 0` returns the prediction itself.
pub fn level_jump(
    x_ka: &[f64],
    x0_hat: &[f64],
    k_a: usize,
    k_b: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if x_ka.len() != x0_hat.len() {
        return Err(CoreError::shape(format!(
            "frame has {} dims, prediction has {}",
            x_ka.len(),
            x0_hat.len()
        )));
    }
    if k_b >= k_a {
        return Err(CoreError::contract(format!(
            "level jump must descend, got {k_a} -> {k_b}"
        )));
    }
    if k_b == 0 {
        return Ok(x0_hat.to_vec());
    }
    let ab_a = schedule.alpha_bar(k_a)?;
    let ab_b = schedule.alpha_bar(k_b)?;
    let (sig_a, noi_a) = (ab_a.sqrt(), (1.0 - ab_a).sqrt());
    let (sig_b, noi_b) = (ab_b.sqrt(), (1.0 - ab_b).sqrt());
    Ok(x_ka
        .iter()
        .zip(x0_hat)
        .map(|(&xk, &xh)| {
            let eps_hat = (xk - sig_a * xh) / noi_a;
            sig_b * xh + noi_b * eps_hat
        })
        .collect())
}
