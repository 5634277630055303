//! Closed-loop evaluation: plan with the trained model, execute a slice of
//! the plan, slide forward, replan. Episodes are independent given their
//! derived seeds and may run on parallel workers without changing results.

use std::collections::VecDeque;
use std::thread;

use crate::envsim::EnvSpec;
use crate::error::{CoreError, Result};
use crate::latentid::{posterior_infer_scaled, prior_predict};
use crate::numerics::Rng;

use super::denoiser::GenTarget;
use super::sample::{stage1_frame, zigzag_sample, ObsFrame};
use super::train::{PlanMode, Stage2Model};

/// Everything the closed-loop run records: per-episode returns and replan
/// counts, plus one (used latent, true context) pair per executed step for
/// probing how well the planner tracked the hidden context.
#[derive(Debug, Clone)]
pub struct RolloutReport {
    pub returns: Vec<f64>,
    /// Latent the plan attached to each executed step, episode-major.
    pub latents: Vec<Vec<f64>>,
    /// Ground-truth context realized at the same steps.
    pub contexts: Vec<Vec<f64>>,
    /// State occupied at each executed step, episode-major.
    pub states: Vec<Vec<f64>>,
    pub replans: Vec<usize>,
}

struct EpisodeOut {
    ret: f64,
    latents: Vec<Vec<f64>>,
    contexts: Vec<Vec<f64>>,
    states: Vec<Vec<f64>>,
    replans: usize,
}

/// Runs the planning loop (observe → plan a block → execute the first
/// `t_exec` actions → slide) for the two planner modes. Conditioning starts
/// at `target_return` and shrinks by the reward collected so far.
pub fn plan_and_act(
    spec: &EnvSpec,
    model: &Stage2Model,
    target_return: f64,
    n_episodes: usize,
    workers: usize,
    rng: &Rng,
) -> Result<RolloutReport> {
    if model.config.mode == PlanMode::Policy {
        return Err(CoreError::config(
            "policy-mode models act step by step; use the policy loop",
        ));
    }
    run_episodes(spec, model, target_return, n_episodes, workers, rng)
}

/// Runs the action-generation loop for a policy-mode model: each replan
/// produces an action block directly and the first `t_exec` are executed.
pub fn policy_act(
    spec: &EnvSpec,
    model: &Stage2Model,
    target_return: f64,
    n_episodes: usize,
    workers: usize,
    rng: &Rng,
) -> Result<RolloutReport> {
    if model.config.mode != PlanMode::Policy {
        return Err(CoreError::config(
            "planner-mode models need the plan-and-act loop",
        ));
    }
    run_episodes(spec, model, target_return, n_episodes, workers, rng)
}

fn check_compat(spec: &EnvSpec, model: &Stage2Model) -> Result<()> {
    spec.validate()?;
    let layout = model.latent.layout();
    if spec.d_s != layout.d_s || spec.d_a != layout.d_a {
        return Err(CoreError::config(format!(
            "env has d_s={}, d_a={} but the model was trained on d_s={}, d_a={}",
            spec.d_s, spec.d_a, layout.d_s, layout.d_a
        )));
    }
    if model.config.mode == PlanMode::PlannerStateIdm {
        let idm = model
            .idm
            .as_ref()
            .ok_or_else(|| CoreError::config("state-only planning needs an inverse model"))?;
        if idm.d_s != spec.d_s || idm.d_a != spec.d_a {
            return Err(CoreError::config(format!(
                "inverse model covers d_s={}, d_a={} but the env has d_s={}, d_a={}",
                idm.d_s, idm.d_a, spec.d_s, spec.d_a
            )));
        }
        if let Some(d) = idm.latent_dim {
            if d != model.latent.latent_dim {
                return Err(CoreError::config(format!(
                    "inverse model expects {d}-dim latents, the model produces {}",
                    model.latent.latent_dim
                )));
            }
        }
    }
    Ok(())
}

fn run_episodes(
    spec: &EnvSpec,
    model: &Stage2Model,
    target_return: f64,
    n_episodes: usize,
    workers: usize,
    rng: &Rng,
) -> Result<RolloutReport> {
    check_compat(spec, model)?;
    if n_episodes == 0 {
        return Err(CoreError::contract("need at least one evaluation episode"));
    }
    let run_one = |ep: usize| -> Result<EpisodeOut> {
        let mut env_rng = rng.derive(2 * ep as u64);
        let mut plan_rng = rng.derive(2 * ep as u64 + 1);
        run_episode(spec, model, target_return, ep, &mut env_rng, &mut plan_rng)
    };

    let workers = workers.max(1).min(n_episodes);
    let mut slots: Vec<Option<Result<EpisodeOut>>> = (0..n_episodes).map(|_| None).collect();
    if workers == 1 {
        for (ep, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run_one(ep));
        }
    } else {
        thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let run_one = &run_one;
                    scope.spawn(move || {
                        (w..n_episodes)
                            .step_by(workers)
                            .map(|ep| (ep, run_one(ep)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for handle in handles {
                for (ep, out) in handle.join().expect("rollout worker panicked") {
                    slots[ep] = Some(out);
                }
            }
        });
    }

    let mut report = RolloutReport {
        returns: Vec::with_capacity(n_episodes),
        latents: Vec::new(),
        contexts: Vec::new(),
        states: Vec::new(),
        replans: Vec::with_capacity(n_episodes),
    };
    for slot in slots {
        let out = slot.expect("every episode index was scheduled")?;
        report.returns.push(out.ret);
        report.latents.extend(out.latents);
        report.contexts.extend(out.contexts);
        report.states.extend(out.states);
        report.replans.push(out.replans);
    }
    Ok(report)
}

/// One closed-loop episode. The env stream draws contexts and noise exactly
/// as the data generator does; only the action source differs.
fn run_episode(
    spec: &EnvSpec,
    model: &Stage2Model,
    target_return: f64,
    episode: usize,
    env_rng: &mut Rng,
    plan_rng: &mut Rng,
) -> Result<EpisodeOut> {
    let mut obs: Vec<ObsFrame> = Vec::with_capacity(spec.horizon);
    let mut queue: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::new();
    let mut c_prev = vec![0.0; spec.d_c()];
    let mut s = spec.reset_state();
    let mut a_prev = vec![0.0; spec.d_a];
    let mut out = EpisodeOut {
        ret: 0.0,
        latents: Vec::with_capacity(spec.horizon),
        contexts: Vec::with_capacity(spec.horizon),
        states: Vec::with_capacity(spec.horizon),
        replans: 0,
    };
    for t in 0..spec.horizon {
        let c = spec.context.next(t, episode, Some(&c_prev), env_rng)?;
        if t > 0 {
            s = spec.transition(&s, &a_prev, &c, env_rng)?;
        }
        if queue.is_empty() {
            queue = plan_block(model, &obs, &s, target_return - out.ret, plan_rng)?;
            out.replans += 1;
        }
        let (a, c_hat) = queue.pop_front().expect("a fresh plan is never empty");
        let mut r = spec.reward_of(&s, &a, &c, t)?;
        if spec.sigma_r > 0.0 {
            r += spec.sigma_r * env_rng.normal();
        }
        out.ret += r;
        out.latents.push(c_hat);
        out.contexts.push(c.clone());
        out.states.push(s.clone());
        obs.push(ObsFrame { s: s.clone(), a: a.clone(), r });
        a_prev = a;
        c_prev = c;
    }
    Ok(out)
}

/// Plans one block ahead of the history and extracts the first `t_exec`
/// actions, each paired with the latent its plan frame carried.
fn plan_block(
    model: &Stage2Model,
    obs: &[ObsFrame],
    s_now: &[f64],
    rtg: f64,
    rng: &mut Rng,
) -> Result<VecDeque<(Vec<f64>, Vec<f64>)>> {
    let ctx = model.sampler_ctx();
    let c_prev = filter_latent(model, obs, rng)?;
    let y = model.goal_vector(rtg);
    let plan = zigzag_sample(&ctx, obs, &c_prev, y, rng)?;
    let d_s = model.latent.layout().d_s;
    let t_exec = model.config.t_exec;
    let mut queue = VecDeque::with_capacity(t_exec);
    match model.config.mode {
        PlanMode::PlannerJoint => {
            for q in 0..t_exec {
                let (_, a) = GenTarget::Joint.split_frame(&plan.frames[q], d_s);
                queue.push_back((a.expect("joint frames carry actions").to_vec(), plan.latents[q].clone()));
            }
        }
        PlanMode::PlannerStateIdm => {
            let idm = model.idm.as_ref().expect("checked at entry");
            for q in 0..t_exec {
                // The first hop starts from the state actually reached; later
                // hops connect imagined states.
                let from = if q == 0 { s_now } else { plan.frames[q].as_slice() };
                let latent = idm.latent_dim.is_some().then(|| plan.latents[q + 1].as_slice());
                let a = idm.infer(from, &plan.frames[q + 1], latent)?;
                queue.push_back((a, plan.latents[q].clone()));
            }
        }
        PlanMode::Policy => {
            for q in 0..t_exec {
                queue.push_back((plan.frames[q].clone(), plan.latents[q].clone()));
            }
        }
    }
    Ok(queue)
}

/// Online belief about the context of the last completed step: the posterior
/// at the newest step owning a full recognition window, advanced by the
/// prediction net over the steps the window may not cover. Too little
/// history falls back to the zero seed, like an episode start.
fn filter_latent(model: &Stage2Model, obs: &[ObsFrame], rng: &mut Rng) -> Result<Vec<f64>> {
    let nets = &model.latent;
    let d_c = nets.latent_dim;
    if !model.config.use_latent {
        return Ok(vec![0.0; d_c]);
    }
    let h = nets.history_len;
    let fut = usize::from(nets.include_future);
    let n = obs.len();
    if n < h + fut + 1 {
        return Ok(vec![0.0; d_c]);
    }
    let frames: Vec<Vec<f64>> = obs[n - h - fut - 1..]
        .iter()
        .map(|o| nets.norm.normalize(&stage1_frame(nets, o)))
        .collect::<Result<_>>()?;
    let mut z = posterior_infer_scaled(nets, &frames)?.sample(rng);
    for _ in 0..fut {
        z = prior_predict(nets, &z)?.sample(rng);
    }
    Ok(z)
}
