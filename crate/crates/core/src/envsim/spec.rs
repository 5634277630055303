//! Environment definitions: a 1-D point mass pushed around by a hidden wind
//! force, and linear-Gaussian state-space models where the context enters
//! either additively or through the dynamics matrix.
//!
//! All dynamics are written so that the caller decides which context value
//! drives a transition; episode generation passes the context indexed by the
//! *destination* step (see `data.rs`).

use crate::envsim::context::ContextProcess;
use crate::error::{CoreError, Result};
use crate::numerics::{Rng, Tensor};

/// Which synthetic system generates the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    /// 1-D point mass with a hidden wind force and velocity-tracking reward.
    PointmassWind,
    /// Point mass with the time-varying goal-direction reward.
    PointmassDir,
    /// `x' = A x + B a + B_c c + eps` — context enters additively.
    LinearGaussAdditive,
    /// `x' = (A0 + c * A1) x + B a + eps` — context scales the dynamics.
    LinearGaussMultiplicative,
}

impl EnvKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvKind::PointmassWind => "pointmass-wind",
            EnvKind::PointmassDir => "pointmass-dir",
            EnvKind::LinearGaussAdditive => "lineargauss-additive",
            EnvKind::LinearGaussMultiplicative => "lineargauss-multiplicative",
        }
    }

    pub fn parse(s: &str) -> Result<EnvKind> {
        match s {
            "pointmass-wind" => Ok(EnvKind::PointmassWind),
            "pointmass-dir" => Ok(EnvKind::PointmassDir),
            "lineargauss-additive" => Ok(EnvKind::LinearGaussAdditive),
            "lineargauss-multiplicative" => Ok(EnvKind::LinearGaussMultiplicative),
            other => Err(CoreError::config(format!("unknown env kind {other:?}"))),
        }
    }
}

/// Reward definition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardVariant {
    /// `r = -(v - v*)^2 - 0.1 ||a||^2`.
    VelocityTracking,
    /// `r = d_t * v - 0.1 ||a||^2` with `d_t = sigmoid(5 sin(2 pi t / 200))`.
    Direction,
}

impl RewardVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            RewardVariant::VelocityTracking => "velocity-tracking",
            RewardVariant::Direction => "direction",
        }
    }

    pub fn parse(s: &str) -> Result<RewardVariant> {
        match s {
            "velocity-tracking" => Ok(RewardVariant::VelocityTracking),
            "direction" => Ok(RewardVariant::Direction),
            other => Err(CoreError::config(format!("unknown reward variant {other:?}"))),
        }
    }
}

/// Scripted demonstrator parameters.
///
/// Point mass: `a = K_p (v* - v) + c + rho v + zeta`. Linear-Gaussian:
/// `a = -(K + sum_j c_j K1) x + zeta`; `K1` defaults to zero, recovering the
/// fixed-gain regulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// Proportional gain K_p (point mass).
    pub k_p: f64,
    /// Fixed feedback gain K, shape [d_a, d_s] (linear-Gaussian).
    pub gain: Tensor,
    /// Context-dependent gain K1, shape [d_a, d_s], scaled by c[0].
    pub gain_ctx: Tensor,
    /// Std of the action noise zeta.
    pub noise: f64,
}

/// Full environment description: dimensions, dynamics constants, the context
/// process, horizon, reward, and the demonstrator.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub d_s: usize,
    pub d_a: usize,
    /// Integration step (point mass).
    pub dt: f64,
    /// Drag coefficient rho (point mass).
    pub drag: f64,
    /// Inertia divisor on the force (point mass); 1 keeps the textbook update.
    pub mass: f64,
    /// Dynamics matrix A (additive) with shape [d_s, d_s].
    pub a_mat: Tensor,
    /// Base dynamics matrix A0 (multiplicative).
    pub a0_mat: Tensor,
    /// Context-scaled matrix A1 (multiplicative).
    pub a1_mat: Tensor,
    /// Action matrix B, shape [d_s, d_a].
    pub b_mat: Tensor,
    /// Context matrix B_c, shape [d_s, d_c] (additive).
    pub bc_mat: Tensor,
    /// Transition noise std.
    pub sigma_s: f64,
    /// Reward noise std.
    pub sigma_r: f64,
    pub context: ContextProcess,
    pub horizon: usize,
    pub reward: RewardVariant,
    /// Fixed tracking target v*.
    pub v_star: f64,
    /// When set, v* is read from this context channel instead.
    pub v_star_channel: Option<usize>,
    /// Context channel acting as the wind force (point mass); `None` removes
    /// the wind from the dynamics so the context can drive the reward alone.
    pub wind_channel: Option<usize>,
    pub expert: ExpertParams,
}

impl EnvSpec {
    /// Point mass in hidden wind with the velocity-tracking reward.
    pub fn pointmass_wind(context: ContextProcess, horizon: usize) -> EnvSpec {
        EnvSpec {
            kind: EnvKind::PointmassWind,
            d_s: 2,
            d_a: 1,
            dt: 0.1,
            drag: 0.1,
            mass: 1.0,
            a_mat: Tensor::zeros(vec![2, 2]),
            a0_mat: Tensor::zeros(vec![2, 2]),
            a1_mat: Tensor::zeros(vec![2, 2]),
            b_mat: Tensor::zeros(vec![2, 1]),
            bc_mat: Tensor::zeros(vec![2, 1]),
            sigma_s: 0.05,
            sigma_r: 0.0,
            context,
            horizon,
            reward: RewardVariant::VelocityTracking,
            v_star: 2.0,
            v_star_channel: None,
            wind_channel: Some(0),
            expert: ExpertParams {
                k_p: 1.0,
                gain: Tensor::zeros(vec![1, 2]),
                gain_ctx: Tensor::zeros(vec![1, 2]),
                noise: 0.05,
            },
        }
    }

    /// Point mass in hidden wind with the goal-direction reward.
    pub fn pointmass_dir(context: ContextProcess, horizon: usize) -> EnvSpec {
        EnvSpec {
            kind: EnvKind::PointmassDir,
            reward: RewardVariant::Direction,
            ..EnvSpec::pointmass_wind(context, horizon)
        }
    }

    /// 1-D linear-Gaussian system with additive context: `x' = a x + b u + bc c + eps`.
    pub fn lineargauss_additive(
        a: f64,
        b: f64,
        bc: f64,
        sigma_s: f64,
        context: ContextProcess,
        horizon: usize,
    ) -> EnvSpec {
        let d_c = context.dim;
        let mut bc_mat = Tensor::zeros(vec![1, d_c]);
        bc_mat.data_mut()[0] = bc;
        EnvSpec {
            kind: EnvKind::LinearGaussAdditive,
            d_s: 1,
            d_a: 1,
            dt: 0.1,
            drag: 0.0,
            mass: 1.0,
            a_mat: Tensor::matrix(1, 1, vec![a]).expect("1x1"),
            a0_mat: Tensor::zeros(vec![1, 1]),
            a1_mat: Tensor::zeros(vec![1, 1]),
            b_mat: Tensor::matrix(1, 1, vec![b]).expect("1x1"),
            bc_mat,
            sigma_s,
            sigma_r: 0.0,
            context,
            horizon,
            reward: RewardVariant::VelocityTracking,
            v_star: 0.0,
            v_star_channel: None,
            wind_channel: None,
            expert: ExpertParams {
                k_p: 0.0,
                gain: Tensor::matrix(1, 1, vec![0.5]).expect("1x1"),
                gain_ctx: Tensor::zeros(vec![1, 1]),
                noise: 0.05,
            },
        }
    }

    /// 1-D linear-Gaussian system with multiplicative context:
    /// `x' = (a0 + c * a1) x + b u + eps`.
    pub fn lineargauss_multiplicative(
        a0: f64,
        a1: f64,
        b: f64,
        sigma_s: f64,
        context: ContextProcess,
        horizon: usize,
    ) -> EnvSpec {
        EnvSpec {
            kind: EnvKind::LinearGaussMultiplicative,
            a_mat: Tensor::zeros(vec![1, 1]),
            a0_mat: Tensor::matrix(1, 1, vec![a0]).expect("1x1"),
            a1_mat: Tensor::matrix(1, 1, vec![a1]).expect("1x1"),
            bc_mat: Tensor::zeros(vec![1, context.dim]),
            ..EnvSpec::lineargauss_additive(0.0, b, 0.0, sigma_s, context, horizon)
        }
    }

    pub fn d_c(&self) -> usize {
        self.context.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.context.validate()?;
        if self.horizon < 4 {
            return Err(CoreError::config(format!(
                "horizon {} < 4: too short for any identification window",
                self.horizon
            )));
        }
        if self.sigma_s < 0.0 || self.sigma_r < 0.0 {
            return Err(CoreError::config("noise scales must be >= 0"));
        }
        match self.kind {
            EnvKind::PointmassWind | EnvKind::PointmassDir => {
                if self.d_s != 2 || self.d_a != 1 {
                    return Err(CoreError::config("point mass requires d_s=2, d_a=1"));
                }
                if self.dt <= 0.0 || self.mass <= 0.0 {
                    return Err(CoreError::config("dt and mass must be > 0"));
                }
                if let Some(ch) = self.wind_channel {
                    if ch >= self.d_c() {
                        return Err(CoreError::config("wind channel out of range"));
                    }
                }
            }
            EnvKind::LinearGaussAdditive => {
                check_dims("A", &self.a_mat, self.d_s, self.d_s)?;
                check_dims("B", &self.b_mat, self.d_s, self.d_a)?;
                check_dims("B_c", &self.bc_mat, self.d_s, self.d_c())?;
                check_dims("K", &self.expert.gain, self.d_a, self.d_s)?;
                check_dims("K1", &self.expert.gain_ctx, self.d_a, self.d_s)?;
            }
            EnvKind::LinearGaussMultiplicative => {
                check_dims("A0", &self.a0_mat, self.d_s, self.d_s)?;
                check_dims("A1", &self.a1_mat, self.d_s, self.d_s)?;
                check_dims("B", &self.b_mat, self.d_s, self.d_a)?;
                check_dims("K", &self.expert.gain, self.d_a, self.d_s)?;
                check_dims("K1", &self.expert.gain_ctx, self.d_a, self.d_s)?;
            }
        }
        if let Some(ch) = self.v_star_channel {
            if ch >= self.d_c() {
                return Err(CoreError::config("v* channel out of range"));
            }
        }
        Ok(())
    }

    /// Initial state of every episode.
    pub fn reset_state(&self) -> Vec<f64> {
        vec![0.0; self.d_s]
    }

    /// The coordinate read as "velocity" by the rewards.
    pub fn velocity_of(&self, s: &[f64]) -> f64 {
        match self.kind {
            EnvKind::PointmassWind | EnvKind::PointmassDir => s[1],
            _ => s[0],
        }
    }

    fn target_velocity(&self, c: &[f64]) -> f64 {
        match self.v_star_channel {
            Some(ch) => c[ch],
            None => self.v_star,
        }
    }

    fn wind(&self, c: &[f64]) -> f64 {
        match self.wind_channel {
            Some(ch) => c[ch],
            None => 0.0,
        }
    }

    fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.d_s {
            return Err(CoreError::shape(format!(
                "state has {} dims, spec has {}",
                s.len(),
                self.d_s
            )));
        }
        Ok(())
    }

    /// Noise-free part of the transition driven by context `c`.
    pub fn transition_mean(&self, s: &[f64], a: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        self.check_state(s)?;
        if a.len() != self.d_a {
            return Err(CoreError::shape(format!(
                "action has {} dims, spec has {}",
                a.len(),
                self.d_a
            )));
        }
        if c.len() != self.d_c() {
            return Err(CoreError::shape(format!(
                "context has {} dims, spec has {}",
                c.len(),
                self.d_c()
            )));
        }
        match self.kind {
            EnvKind::PointmassWind | EnvKind::PointmassDir => {
                let (p, v) = (s[0], s[1]);
                let force = a[0] - self.wind(c) - self.drag * v;
                let v_next = v + force / self.mass * self.dt;
                let p_next = p + v * self.dt;
                Ok(vec![p_next, v_next])
            }
            EnvKind::LinearGaussAdditive => {
                let mut out = matvec(&self.a_mat, s);
                add_in(&mut out, &matvec(&self.b_mat, a));
                add_in(&mut out, &matvec(&self.bc_mat, c));
                Ok(out)
            }
            EnvKind::LinearGaussMultiplicative => {
                let mut out = matvec_mult(&self.a0_mat, &self.a1_mat, c[0], s);
                add_in(&mut out, &matvec(&self.b_mat, a));
                Ok(out)
            }
        }
    }

    /// One stochastic transition; noise is only drawn when `sigma_s > 0`, so a
    /// noiseless spec is a pure function of its inputs.
    pub fn transition(&self, s: &[f64], a: &[f64], c: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let mut next = self.transition_mean(s, a, c)?;
        if self.sigma_s > 0.0 {
            match self.kind {
                // Noise perturbs the velocity; position integrates exactly.
                EnvKind::PointmassWind | EnvKind::PointmassDir => {
                    next[1] += self.sigma_s * rng.normal();
                }
                _ => {
                    for x in next.iter_mut() {
                        *x += self.sigma_s * rng.normal();
                    }
                }
            }
        }
        if !next.iter().all(|x| x.is_finite()) {
            return Err(CoreError::numeric("transition produced a non-finite state"));
        }
        Ok(next)
    }

    /// Deterministic reward `g(s, a, c, t)` (noise is added by `env_step`).
    pub fn reward_of(&self, s: &[f64], a: &[f64], c: &[f64], t: usize) -> Result<f64> {
        self.check_state(s)?;
        let v = self.velocity_of(s);
        let action_cost = 0.1 * a.iter().map(|x| x * x).sum::<f64>();
        let r = match self.reward {
            RewardVariant::VelocityTracking => {
                let target = self.target_velocity(c);
                -(v - target) * (v - target) - action_cost
            }
            RewardVariant::Direction => {
                let phase = 2.0 * std::f64::consts::PI * t as f64 / 200.0;
                let d = sigmoid(5.0 * phase.sin());
                d * v - action_cost
            }
        };
        Ok(r)
    }

    /// One environment step: next state plus noisy reward, both driven by the
    /// supplied context value.
    pub fn env_step(
        &self,
        s: &[f64],
        a: &[f64],
        c: &[f64],
        t: usize,
        rng: &mut Rng,
    ) -> Result<(Vec<f64>, f64)> {
        let next = self.transition(s, a, c, rng)?;
        let mut r = self.reward_of(s, a, c, t)?;
        if self.sigma_r > 0.0 {
            r += self.sigma_r * rng.normal();
        }
        Ok((next, r))
    }

    /// Demonstrator action given the current state and context.
    pub fn expert_action(&self, s: &[f64], c: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let mut a = match self.kind {
            EnvKind::PointmassWind | EnvKind::PointmassDir => {
                let v = s[1];
                let target = self.target_velocity(c);
                vec![self.expert.k_p * (target - v) + self.wind(c) + self.drag * v]
            }
            EnvKind::LinearGaussAdditive | EnvKind::LinearGaussMultiplicative => {
                let base = matvec(&self.expert.gain, s);
                let ctx = matvec(&self.expert.gain_ctx, s);
                base.iter()
                    .zip(&ctx)
                    .map(|(&k, &k1)| -(k + c[0] * k1))
                    .collect()
            }
        };
        if self.expert.noise > 0.0 {
            for x in a.iter_mut() {
                *x += self.expert.noise * rng.normal();
            }
        }
        Ok(a)
    }
}

fn check_dims(name: &str, t: &Tensor, rows: usize, cols: usize) -> Result<()> {
    if t.dims() != [rows, cols] {
        return Err(CoreError::config(format!(
            "{name} must have shape [{rows}, {cols}], got {:?}",
            t.dims()
        )));
    }
    Ok(())
}

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (m.dims()[0], m.dims()[1]);
    debug_assert_eq!(cols, x.len());
    (0..rows)
        .map(|i| (0..cols).map(|j| m.at(i, j) * x[j]).sum())
        .collect()
}

fn matvec_mult(a0: &Tensor, a1: &Tensor, c: f64, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (a0.dims()[0], a0.dims()[1]);
    (0..rows)
        .map(|i| {
            (0..cols)
                .map(|j| (a0.at(i, j) + c * a1.at(i, j)) * x[j])
                .sum()
        })
        .collect()
}

fn add_in(acc: &mut [f64], other: &[f64]) {
    for (x, y) in acc.iter_mut().zip(other) {
        *x += y;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noiseless_pointmass() -> EnvSpec {
        let mut spec = EnvSpec::pointmass_wind(ContextProcess::stepwise(5.0, 5.0, 0.5), 200);
        spec.sigma_s = 0.0;
        spec.expert.noise = 0.0;
        spec
    }

    #[test]
    fn balanced_forces_hold_still() {
        let spec = noiseless_pointmass();
        let mut rng = Rng::seed(0);
        let next = spec.transition(&[0.0, 0.0], &[0.7], &[0.7], &mut rng).unwrap();
        assert_eq!(next, vec![0.0, 0.0]);
    }

    #[test]
    fn pointmass_update_hand_value() {
        // v' = 1 + (2 - 0.5 - 0.1*1) * 0.1 = 1.14, p' = 0 + 1 * 0.1 = 0.1.
        let spec = noiseless_pointmass();
        let mut rng = Rng::seed(0);
        let next = spec.transition(&[0.0, 1.0], &[2.0], &[0.5], &mut rng).unwrap();
        assert!((next[1] - 1.14).abs() < 1e-12);
        assert!((next[0] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn additive_identity_passes_context_through() {
        let mut spec = EnvSpec::lineargauss_additive(
            1.0,
            0.0,
            1.0,
            0.0,
            ContextProcess::stepwise(0.0, 1.0, 0.3),
            10,
        );
        spec.expert.noise = 0.0;
        let mut rng = Rng::seed(0);
        let next = spec.transition(&[0.0], &[9.9], &[3.0], &mut rng).unwrap();
        assert_eq!(next, vec![3.0]);
    }

    #[test]
    fn direction_reward_values() {
        let mut spec = noiseless_pointmass();
        spec.reward = RewardVariant::Direction;
        // t=0: d = sigmoid(0) = 0.5, v=2, a=0 -> r = 1.0.
        let r0 = spec.reward_of(&[0.0, 2.0], &[0.0], &[0.0], 0).unwrap();
        assert!((r0 - 1.0).abs() < 1e-12);
        // t=50: d = sigmoid(5 * sin(pi/2)) = sigmoid(5).
        let oracle = 1.0 / (1.0 + (-5.0f64).exp());
        let r50 = spec.reward_of(&[0.0, 1.0], &[0.0], &[0.0], 50).unwrap();
        assert!((r50 - oracle).abs() < 1e-9);
        assert!((oracle - 0.99331).abs() < 1e-5);
    }

    #[test]
    fn tracking_reward_is_zero_on_target() {
        let spec = noiseless_pointmass();
        let r = spec.reward_of(&[0.0, 2.0], &[0.0], &[0.0], 3).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn expert_pure_feedforward() {
        // noise 0, v = v*, rho = 0 -> a = c.
        let mut spec = noiseless_pointmass();
        spec.drag = 0.0;
        let mut rng = Rng::seed(0);
        let a = spec.expert_action(&[0.0, 2.0], &[1.3], &mut rng).unwrap();
        assert!((a[0] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn expert_controller_hand_value() {
        // K_p=1, v*=2, v=1, c=0.5, rho=0.1 -> a = 1 + 0.5 + 0.1 = 1.6.
        let spec = noiseless_pointmass();
        let mut rng = Rng::seed(0);
        let a = spec.expert_action(&[0.0, 1.0], &[0.5], &mut rng).unwrap();
        assert!((a[0] - 1.6).abs() < 1e-12);
    }

    #[test]
    fn expert_tracks_constant_wind() {
        // Closed-loop oracle: under the noiseless expert the tracking error
        // must die out within 100 steps for a constant context.
        let mut spec = noiseless_pointmass();
        spec.context = ContextProcess::stepwise(5.0, 0.0, 0.0);
        let mut rng = Rng::seed(0);
        let c = vec![5.0];
        let mut s = spec.reset_state();
        for _ in 0..100 {
            let a = spec.expert_action(&s, &c, &mut rng).unwrap();
            s = spec.transition(&s, &a, &c, &mut rng).unwrap();
        }
        assert!((s[1] - spec.v_star).abs() < 0.05, "v = {}", s[1]);
    }

    #[test]
    fn noiseless_step_is_pure() {
        let spec = noiseless_pointmass();
        let mut rng_a = Rng::seed(1);
        let mut rng_b = Rng::seed(999);
        rng_b.uniform();
        let x = spec.env_step(&[0.3, 1.1], &[0.4], &[2.0], 7, &mut rng_a).unwrap();
        let y = spec.env_step(&[0.3, 1.1], &[0.4], &[2.0], 7, &mut rng_b).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn drag_never_speeds_up_a_coasting_mass() {
        let spec = noiseless_pointmass();
        for &v0 in &[3.0, -2.0, 0.5, -0.01] {
            let mut s = vec![0.0, v0];
            for _ in 0..50 {
                let next = spec.transition(&s, &[0.0], &[0.0], &mut Rng::seed(0)).unwrap();
                assert!(next[1].abs() <= s[1].abs() + 1e-12);
                s = next;
            }
        }
    }

    #[test]
    fn stable_additive_system_stays_bounded() {
        let mut spec = EnvSpec::lineargauss_additive(
            0.9,
            0.0,
            1.0,
            0.01,
            ContextProcess::stepwise(0.0, 10.0, 0.05),
            10,
        );
        spec.expert.noise = 0.0;
        let mut rng = Rng::seed(11);
        let mut s = vec![0.0];
        let mut c_prev: Option<Vec<f64>> = None;
        for t in 0..10_000 {
            let c = spec
                .context
                .next(t, 0, c_prev.as_deref(), &mut rng)
                .unwrap();
            s = spec.transition(&s, &[0.0], &c, &mut rng).unwrap();
            assert!(s[0].abs() < 150.0, "diverged to {} at t={t}", s[0]);
            c_prev = Some(c);
        }
    }

    #[test]
    fn multiplicative_context_scales_dynamics() {
        let mut spec = EnvSpec::lineargauss_multiplicative(
            0.6,
            0.3,
            1.0,
            0.0,
            ContextProcess::stepwise(0.0, 0.3, 0.5),
            10,
        );
        spec.expert.noise = 0.0;
        let mut rng = Rng::seed(0);
        let lo = spec.transition(&[2.0], &[0.0], &[-0.3], &mut rng).unwrap();
        let hi = spec.transition(&[2.0], &[0.0], &[0.3], &mut rng).unwrap();
        assert!((lo[0] - 2.0 * (0.6 - 0.3 * 0.3)).abs() < 1e-12);
        assert!((hi[0] - 2.0 * (0.6 + 0.3 * 0.3)).abs() < 1e-12);
    }

    #[test]
    fn short_horizon_is_rejected() {
        let spec = EnvSpec::pointmass_wind(ContextProcess::stepwise(5.0, 5.0, 0.5), 3);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn shape_violations_are_shape_errors() {
        let spec = noiseless_pointmass();
        let mut rng = Rng::seed(0);
        assert!(matches!(
            spec.transition(&[0.0], &[0.0], &[0.0], &mut rng),
            Err(CoreError::Shape(_))
        ));
        assert!(matches!(
            spec.transition(&[0.0, 0.0], &[0.0, 1.0], &[0.0], &mut rng),
            Err(CoreError::Shape(_))
        ));
    }
}
