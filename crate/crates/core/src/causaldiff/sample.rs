//! Block sampling: the plain causal denoising loop and the zigzag sampler,
//! which interleaves frame-by-frame denoising with latent refreshes from the
//! recognition net.
//!
//! All working frames live in the stage-1 normalizer's units; outputs are
//! mapped back to raw units at the end.

use crate::error::{CoreError, Result};
use crate::latentid::{posterior_infer_scaled, prior_predict, Modality, Stage1Nets};
use crate::numerics::{BindIndex, Rng, Tape};

use super::denoiser::{predict_with_summary, DenoiserNet, GenTarget, NoisyBlock};
use super::schedule::{causal_levels, level_jump, BlockLevels, NoiseSchedule};

/// One completed environment step, as the sampler sees the past.
#[derive(Debug, Clone)]
pub struct ObsFrame {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
}

/// Everything the samplers need to borrow: the trained nets, the schedule and
/// ladder, and the sampling switches.
pub struct SamplerCtx<'a> {
    pub denoiser: &'a DenoiserNet,
    pub latent: &'a Stage1Nets,
    pub schedule: &'a NoiseSchedule,
    pub ladder: &'a BlockLevels,
    pub target: GenTarget,
    pub t_obs: usize,
    pub refresh: bool,
    pub use_latent: bool,
}

/// A finished block in raw units together with the latent each frame was
/// finalized with and the number of denoiser calls spent.
#[derive(Debug, Clone)]
pub struct SamplerOutput {
    pub frames: Vec<Vec<f64>>,
    pub latents: Vec<Vec<f64>>,
    pub predicts: usize,
}

/// Stage-1 frame for a completed step, in raw units.
pub(crate) fn stage1_frame(nets: &Stage1Nets, obs: &ObsFrame) -> Vec<f64> {
    let layout = nets.layout();
    let mut frame = Vec::with_capacity(layout.frame_dim());
    frame.extend_from_slice(&obs.s);
    if layout.modality.has_actions() {
        frame.extend_from_slice(&obs.a);
    }
    if layout.modality.has_reward() {
        frame.push(obs.r);
    }
    frame
}

/// Runs the history GRU once in value mode.
pub(crate) fn summary_values(net: &DenoiserNet, hist: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut ix = BindIndex::new();
    let vars = net.bind(&mut tape, &mut ix, "theta", true)?;
    let nodes = hist
        .iter()
        .map(|h| tape.constant_vec(h.clone()))
        .collect::<Result<Vec<_>>>()?;
    let s = vars.summarize_history(&mut tape, &nodes)?;
    Ok(tape.value(s)?.to_vec())
}

/// One clean-block prediction with a precomputed history summary.
fn predict_clean(
    net: &DenoiserNet,
    block: &NoisyBlock,
    summary: &[f64],
) -> Result<Vec<Vec<f64>>> {
    block.validate(net)?;
    let mut tape = Tape::new();
    let mut ix = BindIndex::new();
    let vars = net.bind(&mut tape, &mut ix, "theta", true)?;
    predict_with_summary(net, &vars, &mut tape, block, summary)
}

/// Lowers every frame one level per pass until each sits at its target,
/// re-predicting the whole block between passes. Frames already at their
/// targets are left untouched. Returns the number of denoiser calls spent.
fn descend(
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    frames: &mut [Vec<f64>],
    levels: &mut [usize],
    latents: &[Vec<f64>],
    targets: &[usize],
    summary: &[f64],
    y: [f64; 2],
) -> Result<usize> {
    for (i, (&l, &t)) in levels.iter().zip(targets).enumerate() {
        if l < t {
            return Err(CoreError::contract(format!(
                "frame {i} sits at level {l}, below its target {t}; levels only descend"
            )));
        }
    }
    let mut predicts = 0;
    while levels.iter().zip(targets).any(|(l, t)| l > t) {
        let block = NoisyBlock {
            frames: frames.to_vec(),
            levels: levels.to_vec(),
            latents: latents.to_vec(),
            history: Vec::new(),
            y,
        };
        let preds = predict_clean(net, &block, summary)?;
        predicts += 1;
        for i in 0..frames.len() {
            if levels[i] > targets[i] {
                frames[i] = level_jump(&frames[i], &preds[i], levels[i], levels[i] - 1, schedule)?;
                levels[i] -= 1;
            }
        }
    }
    Ok(predicts)
}

/// Denoises a block in as many coarse sweeps as it has frames. Sweep `j`
/// makes one prediction, finalizes frame `j` with a jump to level zero, and
/// drops every later frame one rung down the block's causal ladder, so a
/// causally noised block finishes front to back with exactly one denoiser
/// call per frame. Frames already at or below a sweep's rung hold still.
pub fn ar_denoise_block(
    net: &DenoiserNet,
    schedule: &NoiseSchedule,
    mut block: NoisyBlock,
) -> Result<NoisyBlock> {
    block.validate(net)?;
    for &l in &block.levels {
        if l > schedule.k_max() {
            return Err(CoreError::contract(format!(
                "block level {l} exceeds schedule depth {}",
                schedule.k_max()
            )));
        }
    }
    let t = block.frames.len();
    let ladder = causal_levels(t, schedule.k_max())?;
    let summary = summary_values(net, &block.history)?;
    for j in 0..t {
        let preds = predict_clean(net, &block, &summary)?;
        for i in j..t {
            let target = if i == j { 0 } else { ladder.level(i - j - 1) };
            if target < block.levels[i] {
                block.frames[i] =
                    level_jump(&block.frames[i], &preds[i], block.levels[i], target, schedule)?;
                block.levels[i] = target;
            }
        }
    }
    Ok(block)
}

/// Generates one block ahead of `obs` with the zigzag procedure: fully noisy
/// frames are first brought onto the causal ladder, then finalized front to
/// back — each step extends the latent chain from the last finalized frame,
/// descends the remaining frames one ladder notch, optionally refreshes the
/// leading frame's latent from the recognition net, and denoises that frame
/// to completion.
///
/// `c_prev` seeds the latent chain (the caller's belief about the step just
/// before the block); `y` is the goal vector passed through to the denoiser.
pub fn zigzag_sample(
    ctx: &SamplerCtx,
    obs: &[ObsFrame],
    c_prev: &[f64],
    y: [f64; 2],
    rng: &mut Rng,
) -> Result<SamplerOutput> {
    let t = ctx.ladder.len();
    let k_top = ctx.schedule.k_max();
    if ctx.ladder.level(t - 1) != k_top {
        return Err(CoreError::contract(format!(
            "ladder tops out at {} but the schedule has {} levels",
            ctx.ladder.level(t - 1),
            k_top
        )));
    }
    let d = ctx.denoiser.frame_dim;
    let d_c = ctx.latent.latent_dim;
    if ctx.use_latent && c_prev.len() != d_c {
        return Err(CoreError::shape(format!(
            "chain seed has {} dims, latent dim is {d_c}",
            c_prev.len()
        )));
    }

    let hist = gru_history(ctx, obs)?;
    let summary = summary_values(ctx.denoiser, &hist)?;

    let mut frames: Vec<Vec<f64>> = (0..t).map(|_| rng.normal_vec(d)).collect();
    let mut levels = vec![k_top; t];
    let mut latents: Vec<Vec<f64>> = vec![vec![0.0; d_c]; t];
    let mut predicts = 0;

    for j in 0..t {
        if ctx.use_latent {
            let mut prev = if j == 0 { c_prev.to_vec() } else { latents[j - 1].clone() };
            for latent in latents.iter_mut().skip(j) {
                let z = prior_predict(ctx.latent, &prev)?.sample(rng);
                prev.clone_from(&z);
                *latent = z;
            }
        }
        // Bring the remaining frames onto the ladder relative to frame j.
        let mut targets = vec![0usize; t];
        for i in j..t {
            targets[i] = ctx.ladder.level(i - j);
        }
        predicts += descend(
            ctx.denoiser,
            ctx.schedule,
            &mut frames,
            &mut levels,
            &latents,
            &targets,
            &summary,
            y,
        )?;
        if ctx.refresh && ctx.use_latent && j + 1 < t {
            if let Some(window) = refresh_window(ctx, obs, &frames, j)? {
                latents[j] = posterior_infer_scaled(ctx.latent, &window)?.sample(rng);
            }
        }
        // Finalize frame j alone; everything behind it holds its level.
        let mut final_targets: Vec<usize> = levels.clone();
        final_targets[j] = 0;
        predicts += descend(
            ctx.denoiser,
            ctx.schedule,
            &mut frames,
            &mut levels,
            &latents,
            &final_targets,
            &summary,
            y,
        )?;
    }

    let frames = frames
        .iter()
        .map(|f| denormalize_gen(ctx, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(SamplerOutput { frames, latents, predicts })
}

/// Normalized stage-1 frames for the trailing `t_obs` observed steps; these
/// feed the history GRU.
fn gru_history(ctx: &SamplerCtx, obs: &[ObsFrame]) -> Result<Vec<Vec<f64>>> {
    let lo = obs.len().saturating_sub(ctx.t_obs);
    obs[lo..]
        .iter()
        .map(|o| ctx.latent.norm.normalize(&stage1_frame(ctx.latent, o)))
        .collect()
}

/// Recognition window for block frame `j`: real frames fill the part that
/// reaches behind the block, the block supplies the rest (frame `j` at its
/// current level, its successor one ladder notch higher). Returns nothing when
/// too few real frames exist for a full window.
fn refresh_window(
    ctx: &SamplerCtx,
    obs: &[ObsFrame],
    frames: &[Vec<f64>],
    j: usize,
) -> Result<Option<Vec<Vec<f64>>>> {
    let h = ctx.latent.history_len as i64;
    let top = j as i64 + i64::from(ctx.latent.include_future);
    let lo = j as i64 - h;
    if lo < -(obs.len() as i64) {
        return Ok(None);
    }
    let mut window = Vec::with_capacity((top - lo + 1) as usize);
    for q in lo..=top {
        if q < 0 {
            let idx = (obs.len() as i64 + q) as usize;
            let raw = stage1_frame(ctx.latent, &obs[idx]);
            window.push(ctx.latent.norm.normalize(&raw)?);
        } else {
            window.push(frames[q as usize].clone());
        }
    }
    Ok(Some(window))
}

fn denormalize_gen(ctx: &SamplerCtx, frame: &[f64]) -> Result<Vec<f64>> {
    match ctx.target {
        GenTarget::Joint | GenTarget::States => ctx.latent.norm.denormalize(frame),
        GenTarget::Actions => ctx.latent.norm.denormalize_action(frame),
    }
}

/// Checks that the stage-1 frame layout and the generation target agree, so
/// generated frames can double as recognition inputs (and be denormalized).
pub fn check_target_compat(target: GenTarget, modality: Modality) -> Result<()> {
    let ok = match target {
        GenTarget::Joint => modality == Modality::StatesActions,
        GenTarget::States => modality == Modality::States,
        GenTarget::Actions => modality.has_actions(),
    };
    if ok {
        Ok(())
    } else {
        Err(CoreError::config(format!(
            "generation target {target:?} is incompatible with stage-1 modality {}",
            modality.as_str()
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::causaldiff::schedule::{causal_levels, forward_noise, make_schedule};
    use crate::envsim::{generate_dataset_seeded, EnvSpec};
    use crate::latentid::{train_stage1, Stage1Config};
    use crate::numerics::ParamVisit;

    fn zeroed_net(frame_dim: usize, latent_dim: usize, t: usize, hist_dim: usize) -> DenoiserNet {
        let mut net = DenoiserNet::init(&mut Rng::seed(0), frame_dim, latent_dim, t, hist_dim);
        net.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        net
    }

    fn causal_block(rng: &mut Rng, schedule: &NoiseSchedule, t: usize, d: usize) -> NoisyBlock {
        let ladder = causal_levels(t, schedule.k_max()).unwrap();
        let frames = (0..t)
            .map(|i| forward_noise(&rng.normal_vec(d), ladder.level(i), schedule, rng))
            .collect::<Result<Vec<_>>>()
            .unwrap();
        NoisyBlock {
            frames,
            levels: ladder.as_slice().to_vec(),
            latents: (0..t).map(|_| rng.normal_vec(2)).collect(),
            history: Vec::new(),
            y: [0.0, 0.0],
        }
    }

    #[test]
    fn causal_block_denoises_to_completion_deterministically() {
        let schedule = make_schedule(20, 1e-3, 0.1).unwrap();
        let net = DenoiserNet::init(&mut Rng::seed(1), 3, 2, 4, 5);
        let mut rng = Rng::seed(2);
        let block = causal_block(&mut rng, &schedule, 4, 3);
        let out = ar_denoise_block(&net, &schedule, block.clone()).unwrap();
        assert!(out.levels.iter().all(|&l| l == 0));
        assert!(out.frames.iter().flatten().all(|v| v.is_finite()));
        let again = ar_denoise_block(&net, &schedule, block).unwrap();
        assert_eq!(out.frames, again.frames);
    }

    #[test]
    fn zero_net_denoises_everything_to_zero() {
        let schedule = make_schedule(15, 1e-3, 0.1).unwrap();
        let net = zeroed_net(2, 2, 3, 4);
        let mut rng = Rng::seed(3);
        let block = causal_block(&mut rng, &schedule, 3, 2);
        let out = ar_denoise_block(&net, &schedule, block).unwrap();
        for f in &out.frames {
            assert!(f.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn single_frame_block_completes() {
        let schedule = make_schedule(8, 1e-2, 0.2).unwrap();
        let net = zeroed_net(2, 2, 1, 4);
        let mut rng = Rng::seed(4);
        let block = causal_block(&mut rng, &schedule, 1, 2);
        let out = ar_denoise_block(&net, &schedule, block).unwrap();
        assert_eq!(out.levels, vec![0]);
        assert_eq!(out.frames[0], vec![0.0, 0.0]);
    }

    #[test]
    fn finalized_frames_are_never_touched() {
        let schedule = make_schedule(10, 1e-3, 0.1).unwrap();
        let net = DenoiserNet::init(&mut Rng::seed(5), 2, 2, 3, 4);
        let mut rng = Rng::seed(6);
        let mut block = causal_block(&mut rng, &schedule, 3, 2);
        block.levels = vec![0, 4, 10];
        let frozen = block.frames[0].clone();
        let out = ar_denoise_block(&net, &schedule, block).unwrap();
        assert_eq!(out.frames[0], frozen);
    }

    #[test]
    fn overdeep_levels_are_rejected() {
        let schedule = make_schedule(10, 1e-3, 0.1).unwrap();
        let net = DenoiserNet::init(&mut Rng::seed(7), 2, 2, 3, 4);
        let mut rng = Rng::seed(8);
        let mut block = causal_block(&mut rng, &schedule, 3, 2);
        block.levels = vec![5, 8, 11];
        assert!(matches!(
            ar_denoise_block(&net, &schedule, block),
            Err(CoreError::Contract(_))
        ));
    }

    /// Small trained stage-1 over a lineargauss env, for zigzag wiring tests.
    fn stage1_fixture() -> (Stage1Nets, Vec<ObsFrame>) {
        let spec = EnvSpec::lineargauss_additive(
            0.5,
            1.0,
            1.0,
            0.1,
            crate::envsim::ContextProcess::stepwise(0.5, 0.3, 0.4),
            30,
        );
        let data = generate_dataset_seeded(&spec, 4, 77).unwrap();
        let mut cfg = Stage1Config::new(5);
        cfg.history_len = 2;
        cfg.latent_dim = 2;
        cfg.epochs = 2;
        let nets = train_stage1(&data, &cfg).unwrap().nets;
        let obs: Vec<ObsFrame> = data.episodes[0]
            .iter()
            .take(8)
            .map(|r| ObsFrame { s: r.s.clone(), a: r.a.clone(), r: r.r })
            .collect();
        (nets, obs)
    }

    fn zigzag_ctx<'a>(
        nets: &'a Stage1Nets,
        denoiser: &'a DenoiserNet,
        schedule: &'a NoiseSchedule,
        ladder: &'a BlockLevels,
        refresh: bool,
        use_latent: bool,
    ) -> SamplerCtx<'a> {
        SamplerCtx {
            denoiser,
            latent: nets,
            schedule,
            ladder,
            target: GenTarget::Joint,
            t_obs: 4,
            refresh,
            use_latent,
        }
    }

    #[test]
    fn zigzag_is_deterministic_given_the_stream() {
        let (nets, obs) = stage1_fixture();
        let layout = nets.layout();
        let d = layout.frame_dim();
        let schedule = make_schedule(12, 1e-3, 0.15).unwrap();
        let ladder = causal_levels(3, 12).unwrap();
        let denoiser =
            DenoiserNet::init(&mut Rng::seed(9), d, nets.latent_dim, 3, layout.frame_dim());
        let ctx = zigzag_ctx(&nets, &denoiser, &schedule, &ladder, true, true);
        let c_prev = vec![0.0; nets.latent_dim];
        let a = zigzag_sample(&ctx, &obs, &c_prev, [0.5, 1.0], &mut Rng::seed(42)).unwrap();
        let b = zigzag_sample(&ctx, &obs, &c_prev, [0.5, 1.0], &mut Rng::seed(42)).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.latents, b.latents);
        assert_eq!(a.frames.len(), 3);
        assert!(a.frames.iter().all(|f| f.len() == d));
        assert!(a.frames.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn latent_free_sampling_reports_zero_latents() {
        let (nets, obs) = stage1_fixture();
        let layout = nets.layout();
        let d = layout.frame_dim();
        let schedule = make_schedule(10, 1e-3, 0.15).unwrap();
        let ladder = causal_levels(2, 10).unwrap();
        let denoiser =
            DenoiserNet::init(&mut Rng::seed(10), d, nets.latent_dim, 2, layout.frame_dim());
        let ctx = zigzag_ctx(&nets, &denoiser, &schedule, &ladder, false, false);
        let out = zigzag_sample(&ctx, &obs, &[], [0.0, 0.0], &mut Rng::seed(1)).unwrap();
        assert!(out.latents.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn refresh_switch_changes_the_draw() {
        let (nets, obs) = stage1_fixture();
        let layout = nets.layout();
        let d = layout.frame_dim();
        let schedule = make_schedule(10, 1e-3, 0.15).unwrap();
        let ladder = causal_levels(3, 10).unwrap();
        let denoiser =
            DenoiserNet::init(&mut Rng::seed(11), d, nets.latent_dim, 3, layout.frame_dim());
        let c_prev = vec![0.0; nets.latent_dim];
        let on = zigzag_ctx(&nets, &denoiser, &schedule, &ladder, true, true);
        let off = zigzag_ctx(&nets, &denoiser, &schedule, &ladder, false, true);
        let a = zigzag_sample(&on, &obs, &c_prev, [0.0, 0.0], &mut Rng::seed(2)).unwrap();
        let b = zigzag_sample(&off, &obs, &c_prev, [0.0, 0.0], &mut Rng::seed(2)).unwrap();
        assert_ne!(a.frames, b.frames);
    }

    #[test]
    fn short_history_falls_back_to_the_prior_chain() {
        let (nets, obs) = stage1_fixture();
        let layout = nets.layout();
        let d = layout.frame_dim();
        let schedule = make_schedule(10, 1e-3, 0.15).unwrap();
        let ladder = causal_levels(3, 10).unwrap();
        let denoiser =
            DenoiserNet::init(&mut Rng::seed(12), d, nets.latent_dim, 3, layout.frame_dim());
        let ctx = zigzag_ctx(&nets, &denoiser, &schedule, &ladder, true, true);
        let c_prev = vec![0.0; nets.latent_dim];
        // One observed frame is too little for any recognition window.
        let out = zigzag_sample(&ctx, &obs[..1], &c_prev, [0.0, 0.0], &mut Rng::seed(3)).unwrap();
        assert!(out.frames.iter().flatten().all(|v| v.is_finite()));
        // No history at all still samples.
        let out = zigzag_sample(&ctx, &[], &c_prev, [0.0, 0.0], &mut Rng::seed(4)).unwrap();
        assert!(out.frames.iter().flatten().all(|v| v.is_finite()));
    }

    /// Two frames over a two-level schedule walk the staircase one move at a
    /// time: descend to the ladder, finalize, re-ladder, finalize — four
    /// predictions, with the first frame finished before the second leaves its
    /// shallow rung.
    #[test]
    fn zigzag_interleaves_ladder_moves_and_finalization() {
        let (nets, obs) = stage1_fixture();
        let layout = nets.layout();
        let d = layout.frame_dim();
        let schedule = make_schedule(2, 1e-3, 0.1).unwrap();
        let ladder = causal_levels(2, 2).unwrap();
        let denoiser =
            DenoiserNet::init(&mut Rng::seed(13), d, nets.latent_dim, 2, layout.frame_dim());
        let ctx = zigzag_ctx(&nets, &denoiser, &schedule, &ladder, true, true);
        let c_prev = vec![0.0; nets.latent_dim];
        let out = zigzag_sample(&ctx, &obs, &c_prev, [0.0, 0.0], &mut Rng::seed(5)).unwrap();
        assert_eq!(out.predicts, 4);
    }

    /// The plain causal loop spends exactly one prediction per frame.
    #[test]
    fn causal_loop_yields_finite_frames_from_deep_noise() {
        let schedule = make_schedule(9, 1e-3, 0.1).unwrap();
        let net = DenoiserNet::init(&mut Rng::seed(14), 2, 2, 3, 4);
        let mut rng = Rng::seed(15);
        let mut block = causal_block(&mut rng, &schedule, 3, 2);
        // All frames at the top level is also a valid start.
        block.levels = vec![9, 9, 9];
        let out = ar_denoise_block(&net, &schedule, block).unwrap();
        assert!(out.levels.iter().all(|&l| l == 0));
        assert!(out.frames.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn target_modality_compatibility_is_enforced() {
        assert!(check_target_compat(GenTarget::Joint, Modality::StatesActions).is_ok());
        assert!(check_target_compat(GenTarget::Joint, Modality::States).is_err());
        assert!(check_target_compat(GenTarget::Joint, Modality::StatesActionsRewards).is_err());
        assert!(check_target_compat(GenTarget::States, Modality::States).is_ok());
        assert!(check_target_compat(GenTarget::States, Modality::StatesActions).is_err());
        assert!(check_target_compat(GenTarget::Actions, Modality::StatesActions).is_ok());
        assert!(check_target_compat(GenTarget::Actions, Modality::StatesActionsRewards).is_ok());
        assert!(check_target_compat(GenTarget::Actions, Modality::States).is_err());
    }
}
