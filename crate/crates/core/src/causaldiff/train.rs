//! Stage-2 training: the block denoiser learns to predict clean frames while
//! the recognition and prediction heads carried over from stage 1 are refined
//! against it. Each loss term reaches exactly one parameter group — the
//! denoising loss trains the denoiser, the posterior-conditioned loss trains
//! the recognition net, the prior-conditioned loss trains the prediction net,
//! and a margin loss keeps the posterior ahead of the prior — with
//! stop-gradient barriers everywhere else.

use std::collections::BTreeMap;
use std::path::Path;

use crate::envsim::Dataset;
use crate::error::{CoreError, Result};
use crate::latentid::{posterior_infer_scaled, stage1_from_parts, PosteriorNet, PriorNet, Stage1Nets};
use crate::numerics::{
    assign_params, collect_params, load_checkpoint, reparam_sample, save_checkpoint, scoped,
    AdamState, BindIndex, GradAccum, Gradients, ParamVisit, Rng, Tape, Tensor, VarId,
};

use super::denoiser::{DenoiserNet, GenTarget};
use super::idm::IdmNet;
use super::sample::{check_target_compat, SamplerCtx};
use super::schedule::{causal_levels, forward_noise, make_schedule, BlockLevels, NoiseSchedule};

/// Guard added inside logarithms so an exactly-zero loss stays finite.
const LOG_GUARD: f64 = 1e-12;

/// How plans become actions: generate state-action frames jointly, generate
/// states and invert them through a learned inverse-dynamics model, or
/// generate action frames directly and act on them one step at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanMode {
    PlannerJoint,
    PlannerStateIdm,
    Policy,
}

impl PlanMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlanMode::PlannerJoint => "planner-joint",
            PlanMode::PlannerStateIdm => "planner-state+idm",
            PlanMode::Policy => "policy",
        }
    }

    pub fn parse(s: &str) -> Result<PlanMode> {
        match s {
            "planner-joint" => Ok(PlanMode::PlannerJoint),
            "planner-state+idm" => Ok(PlanMode::PlannerStateIdm),
            "policy" => Ok(PlanMode::Policy),
            other => Err(CoreError::config(format!("unknown mode {other:?}"))),
        }
    }

    pub fn gen_target(&self) -> GenTarget {
        match self {
            PlanMode::PlannerJoint => GenTarget::Joint,
            PlanMode::PlannerStateIdm => GenTarget::States,
            PlanMode::Policy => GenTarget::Actions,
        }
    }
}

/// How noise levels are assigned to block frames during training: the causal
/// ladder, one shared mid-depth level, or an independent uniform draw per
/// frame. Sampling always walks the causal ladder; this only shapes what the
/// denoiser sees while learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LevelSchedule {
    Causal,
    Same,
    Random,
}

impl LevelSchedule {
    pub fn as_str(&self) -> &'static str {
        match self {
            LevelSchedule::Causal => "causal",
            LevelSchedule::Same => "same",
            LevelSchedule::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<LevelSchedule> {
        match s {
            "causal" => Ok(LevelSchedule::Causal),
            "same" => Ok(LevelSchedule::Same),
            "random" => Ok(LevelSchedule::Random),
            other => Err(CoreError::config(format!("unknown level schedule {other:?}"))),
        }
    }
}

/// What the goal vector carries: a normalized return-to-go with an indicator
/// flag (zeroed for a random fraction of training samples so the net also
/// learns the unconditioned distribution), or nothing at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConditionKind {
    ReturnToGo,
    Unconditioned,
}

impl ConditionKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionKind::ReturnToGo => "rtg",
            ConditionKind::Unconditioned => "none",
        }
    }

    pub fn parse(s: &str) -> Result<ConditionKind> {
        match s {
            "rtg" => Ok(ConditionKind::ReturnToGo),
            "none" => Ok(ConditionKind::Unconditioned),
            other => Err(CoreError::config(format!("unknown condition kind {other:?}"))),
        }
    }
}

/// Stage-2 configuration. `new` fills workable desk-scale defaults; everything
/// is plain data so callers can override fields before validating.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub mode: PlanMode,
    /// Frames per generated block.
    pub t_plan: usize,
    /// Actions executed per plan before replanning.
    pub t_exec: usize,
    /// Observed steps fed to the history summarizer.
    pub t_obs: usize,
    /// Noise levels in the schedule.
    pub k_max: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub lambda_prior: f64,
    pub lambda_rel: f64,
    /// The relational margin is this fraction of the previous epoch's mean
    /// prior loss (zero in the first epoch).
    pub margin_scale: f64,
    pub condition: ConditionKind,
    /// Probability of zeroing the goal vector for a training sample.
    pub guidance_dropout: f64,
    pub schedule: LevelSchedule,
    /// Refine the recognition/prediction heads alongside the denoiser.
    pub refine: bool,
    /// Re-infer latents from partially denoised frames while sampling.
    pub refresh: bool,
    /// Condition on latents at all; off for the latent-free ablation.
    pub use_latent: bool,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Stage2Config {
    pub fn new(mode: PlanMode, seed: u64) -> Stage2Config {
        let t_plan = 8;
        let t_exec = match mode {
            PlanMode::PlannerJoint => t_plan,
            PlanMode::PlannerStateIdm => t_plan - 1,
            PlanMode::Policy => 1,
        };
        Stage2Config {
            mode,
            t_plan,
            t_exec,
            t_obs: 4,
            k_max: 100,
            beta_min: 1e-4,
            beta_max: 2e-2,
            lambda_prior: 0.1,
            lambda_rel: 0.1,
            margin_scale: 0.05,
            condition: ConditionKind::ReturnToGo,
            guidance_dropout: 0.1,
            schedule: LevelSchedule::Causal,
            refine: true,
            refresh: mode != PlanMode::Policy,
            use_latent: true,
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_plan < 2 {
            return Err(CoreError::config("plan horizon must be at least 2"));
        }
        if self.t_obs == 0 {
            return Err(CoreError::config("observation horizon must be positive"));
        }
        if self.t_plan > self.k_max {
            return Err(CoreError::config(format!(
                "a {}-frame block needs at least that many noise levels, got {}",
                self.t_plan, self.k_max
            )));
        }
        make_schedule(self.k_max, self.beta_min, self.beta_max)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::config("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(CoreError::config("learning rate must be positive"));
        }
        if self.lambda_prior < 0.0 || self.lambda_rel < 0.0 || self.margin_scale < 0.0 {
            return Err(CoreError::config("loss weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.guidance_dropout) {
            return Err(CoreError::config("guidance dropout must lie in [0, 1)"));
        }
        match self.mode {
            PlanMode::Policy => {
                if self.t_exec != 1 {
                    return Err(CoreError::config("policy mode acts one step at a time"));
                }
                if self.refresh {
                    return Err(CoreError::config(
                        "policy mode cannot refresh: action frames are no recognition input",
                    ));
                }
            }
            PlanMode::PlannerStateIdm => {
                if self.t_exec == 0 || self.t_exec + 1 > self.t_plan {
                    return Err(CoreError::config(
                        "state planning needs a successor frame for every executed action",
                    ));
                }
            }
            PlanMode::PlannerJoint => {
                if self.t_exec == 0 || self.t_exec > self.t_plan {
                    return Err(CoreError::config(
                        "execution horizon must lie in 1..=plan horizon",
                    ));
                }
            }
        }
        if !self.use_latent && (self.refine || self.refresh) {
            return Err(CoreError::config(
                "the latent-free ablation has nothing to refine or refresh",
            ));
        }
        Ok(())
    }
}

/// Loss values of one training step or epoch; the refinement terms are absent
/// when only the denoiser trains.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossReport {
    pub l_diff: f64,
    pub l_post: Option<f64>,
    pub l_prior: Option<f64>,
    pub l_rel: Option<f64>,
    pub l_dr: Option<f64>,
}

/// One training example: the trailing observed frames, the clean future block
/// in generation space, recognition windows for the anchor step and each block
/// frame, and the return-to-go at the block's start.
#[derive(Debug, Clone)]
pub struct Stage2Sample {
    pub hist: Vec<Vec<f64>>,
    pub clean: Vec<Vec<f64>>,
    /// `t_plan + 1` windows; the first belongs to the anchor step and seeds
    /// the latent chain, the rest to the block frames in order.
    pub windows: Vec<Vec<Vec<f64>>>,
    pub rtg: f64,
}

/// The clean generation-space frame of one recorded step, normalized.
fn normalized_gen_frame(
    nets: &Stage1Nets,
    target: GenTarget,
    s: &[f64],
    a: &[f64],
) -> Result<Vec<f64>> {
    match target {
        GenTarget::Joint | GenTarget::States => nets.norm.normalize(&target.frame_of(s, a)),
        GenTarget::Actions => nets.norm.normalize_action(a),
    }
}

/// Cuts every admissible training block out of the dataset: the anchor needs
/// `t_obs` observed steps ending at it, a full recognition window for itself
/// and each block frame, and `t_plan` future steps.
pub fn extract_stage2(
    dataset: &Dataset,
    nets: &Stage1Nets,
    cfg: &Stage2Config,
) -> Result<Vec<Stage2Sample>> {
    cfg.validate()?;
    check_target_compat(cfg.mode.gen_target(), nets.layout().modality)?;
    let layout = nets.layout();
    let target = cfg.mode.gen_target();
    let h = nets.history_len;
    let fut = usize::from(nets.include_future);
    let mut out = Vec::new();
    for ep in &dataset.episodes {
        let need = h.max(cfg.t_obs - 1) + cfg.t_plan + fut + 1;
        if ep.len() < need {
            continue;
        }
        for t in h.max(cfg.t_obs - 1)..=ep.len() - 1 - cfg.t_plan - fut {
            let hist = (t + 1 - cfg.t_obs..=t)
                .map(|i| nets.norm.normalize(&layout.frame_of(&ep[i])))
                .collect::<Result<Vec<_>>>()?;
            let clean = (t + 1..=t + cfg.t_plan)
                .map(|i| normalized_gen_frame(nets, target, &ep[i].s, &ep[i].a))
                .collect::<Result<Vec<_>>>()?;
            let windows = (t..=t + cfg.t_plan)
                .map(|step| {
                    (step - h..=step + fut)
                        .map(|i| nets.norm.normalize(&layout.frame_of(&ep[i])))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let rtg = ep[t + 1..].iter().map(|r| r.r).sum();
            out.push(Stage2Sample { hist, clean, windows, rtg });
        }
    }
    if out.is_empty() {
        return Err(CoreError::contract(
            "no episode is long enough to cut a training block",
        ));
    }
    Ok(out)
}

/// Everything a refinement step borrows.
pub struct RefineCtx<'a> {
    pub denoiser: &'a DenoiserNet,
    /// Parameters for the frozen-denoiser roles; defaults to `denoiser`.
    /// Probing code passes an unperturbed copy here so nudging the live net
    /// leaves the stop-gradded paths untouched.
    pub frozen: Option<&'a DenoiserNet>,
    pub latent: &'a Stage1Nets,
    pub cfg: &'a Stage2Config,
    pub schedule: &'a NoiseSchedule,
    pub ladder: &'a BlockLevels,
}

/// Probe switches for [`refine_losses`]. Training uses the default; gradient
/// checks pin the stop-gradded quantities from a baseline run so nudged
/// re-evaluations differentiate the loss as defined.
#[derive(Debug, Clone, Default)]
pub struct RefineOpts {
    /// Also back-propagate each loss term separately.
    pub per_term: bool,
    /// Fixed posterior latents for the denoising-loss conditioning.
    pub post_override: Option<Vec<Vec<f64>>>,
    /// Fixed value for the stop-gradded log prior loss inside the margin.
    pub prior_log_pin: Option<f64>,
}

/// Losses, conditioning values, and gradients of one refinement step.
#[derive(Debug, Clone)]
pub struct RefineProbe {
    pub report: LossReport,
    /// Noise level assigned to each frame.
    pub levels: Vec<usize>,
    /// Posterior latent values that conditioned the denoising loss.
    pub post_latents: Vec<Vec<f64>>,
    /// The stop-gradded log prior loss used by the margin, when refining.
    pub prior_log_pin: Option<f64>,
    pub grads_total: BTreeMap<String, Vec<f64>>,
    pub grads_diff: BTreeMap<String, Vec<f64>>,
    pub grads_post: BTreeMap<String, Vec<f64>>,
    pub grads_prior: BTreeMap<String, Vec<f64>>,
    pub grads_rel: BTreeMap<String, Vec<f64>>,
}

/// Mean over frames of the squared error summed within each frame.
fn block_mse(tape: &mut Tape, preds: &[VarId], targets: &[VarId]) -> Result<VarId> {
    let mut per = Vec::with_capacity(preds.len());
    for (&p, &c) in preds.iter().zip(targets) {
        let d = tape.sub(p, c)?;
        let sq = tape.square(d)?;
        per.push(tape.sum(sq)?);
    }
    let stacked = tape.concat(&per)?;
    tape.mean(stacked)
}

/// One training step's losses and gradients on a single sample.
///
/// The denoising loss sees the live denoiser conditioned on posterior latent
/// values held constant; the posterior and prior losses see a frozen denoiser
/// conditioned on live reparameterized latents from the recognition net and
/// the prediction chain respectively; the margin loss pushes the posterior
/// loss below the stop-gradded prior loss. Draws happen in a fixed order
/// (levels, goal dropout, frame noise, posterior latents, prior chain) so a
/// fixed seed yields identical randomness across re-evaluations.
pub fn refine_losses(
    ctx: &RefineCtx,
    sample: &Stage2Sample,
    c_prev: &[f64],
    y_goal: [f64; 2],
    margin: f64,
    opts: &RefineOpts,
    rng: &mut Rng,
) -> Result<RefineProbe> {
    let cfg = ctx.cfg;
    let t_p = cfg.t_plan;
    if sample.clean.len() != t_p {
        return Err(CoreError::shape(format!(
            "sample has {} block frames, config plans {t_p}",
            sample.clean.len()
        )));
    }
    if cfg.use_latent && sample.windows.len() != t_p + 1 {
        return Err(CoreError::shape(format!(
            "sample has {} recognition windows, expected {}",
            sample.windows.len(),
            t_p + 1
        )));
    }
    let k = ctx.schedule.k_max();

    let levels: Vec<usize> = match cfg.schedule {
        LevelSchedule::Causal => (0..t_p).map(|i| ctx.ladder.level(i)).collect(),
        LevelSchedule::Same => vec![(k / 2).max(1); t_p],
        LevelSchedule::Random => (0..t_p).map(|_| rng.below(k) + 1).collect(),
    };
    let y = match cfg.condition {
        ConditionKind::ReturnToGo => {
            if rng.uniform() < cfg.guidance_dropout {
                [0.0, 0.0]
            } else {
                y_goal
            }
        }
        ConditionKind::Unconditioned => [0.0, 0.0],
    };
    let noisy: Vec<Vec<f64>> = sample
        .clean
        .iter()
        .zip(&levels)
        .map(|(x, &lv)| forward_noise(x, lv, ctx.schedule, rng))
        .collect::<Result<_>>()?;

    let mut tape = Tape::new();
    let mut ix = BindIndex::new();
    let live = ctx.denoiser.bind(&mut tape, &mut ix, "theta", false)?;

    let d_c = ctx.latent.latent_dim;
    let mut post_nodes = Vec::new();
    let mut post_values: Vec<Vec<f64>>;
    if cfg.use_latent {
        post_values = Vec::with_capacity(t_p);
        if cfg.refine {
            let post_vars = ctx.latent.post.bind(&mut tape, &mut ix, "psi", false)?;
            for window in &sample.windows[1..] {
                let nodes = window
                    .iter()
                    .map(|f| tape.constant_vec(f.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let belief = post_vars.forward(&mut tape, &nodes)?;
                let z = reparam_sample(&mut tape, belief.mean, belief.logvar, rng)?;
                post_values.push(tape.value(z)?.to_vec());
                post_nodes.push(z);
            }
        } else {
            for window in &sample.windows[1..] {
                post_values.push(posterior_infer_scaled(ctx.latent, window)?.sample(rng));
            }
        }
    } else {
        post_values = vec![vec![0.0; d_c]; t_p];
    }
    let mut prior_nodes = Vec::new();
    if cfg.refine {
        let prior_vars = ctx.latent.prior.bind(&mut tape, &mut ix, "phi", false)?;
        let mut c = tape.constant_vec(c_prev.to_vec())?;
        for _ in 0..t_p {
            let belief = prior_vars.forward(&mut tape, c)?;
            let z = reparam_sample(&mut tape, belief.mean, belief.logvar, rng)?;
            prior_nodes.push(z);
            c = z;
        }
    }

    let hist_nodes = sample
        .hist
        .iter()
        .map(|h| tape.constant_vec(h.clone()))
        .collect::<Result<Vec<_>>>()?;
    let y_node = tape.constant_vec(vec![y[0], y[1]])?;
    let noisy_nodes = noisy
        .iter()
        .map(|f| tape.constant_vec(f.clone()))
        .collect::<Result<Vec<_>>>()?;
    let clean_nodes = sample
        .clean
        .iter()
        .map(|f| tape.constant_vec(f.clone()))
        .collect::<Result<Vec<_>>>()?;

    let cond_diff = match &opts.post_override {
        Some(fixed) => {
            if fixed.len() != t_p {
                return Err(CoreError::shape(format!(
                    "posterior override has {} frames, block has {t_p}",
                    fixed.len()
                )));
            }
            fixed
                .iter()
                .map(|v| tape.constant_vec(v.clone()))
                .collect::<Result<Vec<_>>>()?
        }
        None => post_values
            .iter()
            .map(|v| tape.constant_vec(v.clone()))
            .collect::<Result<Vec<_>>>()?,
    };
    let summary_live = live.summarize_history(&mut tape, &hist_nodes)?;
    let preds = live.predict(&mut tape, &noisy_nodes, &levels, &cond_diff, summary_live, y_node)?;
    let l_diff_node = block_mse(&mut tape, &preds, &clean_nodes)?;

    let mut refined = None;
    if cfg.refine {
        let frozen_net = ctx.frozen.unwrap_or(ctx.denoiser);
        let mut scratch = BindIndex::new();
        let frozen = frozen_net.bind(&mut tape, &mut scratch, "theta", true)?;
        let summary_frozen = frozen.summarize_history(&mut tape, &hist_nodes)?;
        let preds_post =
            frozen.predict(&mut tape, &noisy_nodes, &levels, &post_nodes, summary_frozen, y_node)?;
        let l_post_node = block_mse(&mut tape, &preds_post, &clean_nodes)?;
        let preds_prior =
            frozen.predict(&mut tape, &noisy_nodes, &levels, &prior_nodes, summary_frozen, y_node)?;
        let l_prior_node = block_mse(&mut tape, &preds_prior, &clean_nodes)?;

        let pin = match opts.prior_log_pin {
            Some(p) => p,
            None => (tape.value_scalar(l_prior_node)? + LOG_GUARD).ln(),
        };
        let guarded = tape.add_const(l_post_node, LOG_GUARD)?;
        let log_post = tape.log(guarded)?;
        let shifted = tape.add_const(log_post, margin - pin)?;
        let l_rel_node = tape.softplus(shifted)?;
        refined = Some((l_post_node, l_prior_node, l_rel_node, pin));
    }

    let total_node = match refined {
        Some((lp, lq, lr, _)) => {
            let mut acc = tape.add(l_diff_node, lp)?;
            let wp = tape.scale(lq, cfg.lambda_prior)?;
            acc = tape.add(acc, wp)?;
            let wr = tape.scale(lr, cfg.lambda_rel)?;
            tape.add(acc, wr)?
        }
        None => l_diff_node,
    };

    let l_diff = tape.value_scalar(l_diff_node)?;
    let mut report = LossReport { l_diff, ..LossReport::default() };
    if let Some((lp, lq, lr, _)) = refined {
        let l_post = tape.value_scalar(lp)?;
        let l_prior = tape.value_scalar(lq)?;
        let l_rel = tape.value_scalar(lr)?;
        report.l_post = Some(l_post);
        report.l_prior = Some(l_prior);
        report.l_rel = Some(l_rel);
        report.l_dr = Some(l_post + cfg.lambda_prior * l_prior + cfg.lambda_rel * l_rel);
    }
    let finite = report.l_diff.is_finite()
        && [report.l_post, report.l_prior, report.l_rel]
            .iter()
            .all(|v| v.map_or(true, f64::is_finite));
    if !finite {
        return Err(CoreError::numeric("refinement step produced a non-finite loss"));
    }

    let gather = |tape: &Tape, ix: &BindIndex, root: VarId| -> Result<BTreeMap<String, Vec<f64>>> {
        let grads: Gradients = tape.backward(root)?;
        Ok(ix.gather(&grads))
    };
    let grads_total = gather(&tape, &ix, total_node)?;
    let (grads_diff, grads_post, grads_prior, grads_rel) = if opts.per_term {
        match refined {
            Some((lp, lq, lr, _)) => (
                gather(&tape, &ix, l_diff_node)?,
                gather(&tape, &ix, lp)?,
                gather(&tape, &ix, lq)?,
                gather(&tape, &ix, lr)?,
            ),
            None => (
                gather(&tape, &ix, l_diff_node)?,
                BTreeMap::new(),
                BTreeMap::new(),
                BTreeMap::new(),
            ),
        }
    } else {
        (BTreeMap::new(), BTreeMap::new(), BTreeMap::new(), BTreeMap::new())
    };

    Ok(RefineProbe {
        report,
        levels,
        post_latents: post_values,
        prior_log_pin: refined.map(|(_, _, _, pin)| pin),
        grads_total,
        grads_diff,
        grads_post,
        grads_prior,
        grads_rel,
    })
}

/// Adapter presenting the trainable parameter groups to the optimizer under
/// the same names the gradient maps use.
struct TrainView<'a> {
    den: &'a mut DenoiserNet,
    post: Option<&'a mut PosteriorNet>,
    prior: Option<&'a mut PriorNet>,
}

impl ParamVisit for TrainView<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.den.visit(&scoped(prefix, "theta"), f);
        if let Some(p) = &self.post {
            p.visit(&scoped(prefix, "psi"), f);
        }
        if let Some(p) = &self.prior {
            p.visit(&scoped(prefix, "phi"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.den.visit_mut(&scoped(prefix, "theta"), f);
        if let Some(p) = &mut self.post {
            p.visit_mut(&scoped(prefix, "psi"), f);
        }
        if let Some(p) = &mut self.prior {
            p.visit_mut(&scoped(prefix, "phi"), f);
        }
    }
}

/// A trained planner bundle: the denoiser, the (possibly refined) stage-1
/// nets it conditions on, an optional inverse-dynamics model, and the
/// sampling machinery implied by the configuration.
#[derive(Debug, Clone)]
pub struct Stage2Model {
    pub denoiser: DenoiserNet,
    pub latent: Stage1Nets,
    pub idm: Option<IdmNet>,
    pub config: Stage2Config,
    pub schedule: NoiseSchedule,
    pub ladder: BlockLevels,
    pub rtg_mean: f64,
    pub rtg_std: f64,
}

/// Training outcome: the model plus one mean loss report per epoch.
#[derive(Debug)]
pub struct Stage2Train {
    pub model: Stage2Model,
    pub epochs: Vec<LossReport>,
}

/// Trains the denoiser (and, unless refinement is off, the recognition and
/// prediction heads) on blocks cut from the dataset.
pub fn train_stage2(
    dataset: &Dataset,
    stage1: &Stage1Nets,
    cfg: &Stage2Config,
) -> Result<Stage2Train> {
    let samples = extract_stage2(dataset, stage1, cfg)?;
    let layout = stage1.layout();
    let target = cfg.mode.gen_target();
    let frame_dim = target.frame_dim(layout.d_s, layout.d_a);
    let schedule = make_schedule(cfg.k_max, cfg.beta_min, cfg.beta_max)?;
    let ladder = causal_levels(cfg.t_plan, cfg.k_max)?;

    let n = samples.len() as f64;
    let rtg_mean = samples.iter().map(|s| s.rtg).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.rtg - rtg_mean).powi(2)).sum::<f64>() / n;
    let rtg_std = if var.sqrt() < 1e-6 { 1.0 } else { var.sqrt() };

    let master = Rng::seed(cfg.seed);
    let mut model = Stage2Model {
        denoiser: DenoiserNet::init(
            &mut master.derive(0),
            frame_dim,
            stage1.latent_dim,
            cfg.t_plan,
            layout.frame_dim(),
        ),
        latent: stage1.clone(),
        idm: None,
        config: cfg.clone(),
        schedule,
        ladder,
        rtg_mean,
        rtg_std,
    };

    let d_c = stage1.latent_dim;
    let mut adam = AdamState::new(cfg.lr);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut prev_prior_mean = 0.0;
    for epoch in 0..cfg.epochs {
        let mut rng = master.derive(1 + epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        let margin = if epoch == 0 { 0.0 } else { cfg.margin_scale * prev_prior_mean };

        let mut sums = [0.0; 5];
        for chunk in order.chunks(cfg.batch_size) {
            let mut accum = GradAccum::new();
            for &i in chunk {
                let sample = &samples[i];
                let c_prev = if cfg.refine {
                    posterior_infer_scaled(&model.latent, &sample.windows[0])?.sample(&mut rng)
                } else {
                    vec![0.0; d_c]
                };
                let y = [(sample.rtg - rtg_mean) / rtg_std, 1.0];
                let ctx = RefineCtx {
                    denoiser: &model.denoiser,
                    frozen: None,
                    latent: &model.latent,
                    cfg,
                    schedule: &model.schedule,
                    ladder: &model.ladder,
                };
                let probe = refine_losses(
                    &ctx,
                    sample,
                    &c_prev,
                    y,
                    margin,
                    &RefineOpts::default(),
                    &mut rng,
                )
                .map_err(|e| CoreError::numeric(format!("epoch {epoch}: {e}")))?;
                accum.add(&probe.grads_total);
                let r = probe.report;
                sums[0] += r.l_diff;
                sums[1] += r.l_post.unwrap_or(0.0);
                sums[2] += r.l_prior.unwrap_or(0.0);
                sums[3] += r.l_rel.unwrap_or(0.0);
                sums[4] += r.l_dr.unwrap_or(0.0);
            }
            let mean = accum.mean();
            let mut view = TrainView {
                den: &mut model.denoiser,
                post: cfg.refine.then_some(&mut model.latent.post),
                prior: cfg.refine.then_some(&mut model.latent.prior),
            };
            adam.step(&mut view, "", &mean)?;
        }

        let mean_of = |s: f64| s / samples.len() as f64;
        let report = LossReport {
            l_diff: mean_of(sums[0]),
            l_post: cfg.refine.then(|| mean_of(sums[1])),
            l_prior: cfg.refine.then(|| mean_of(sums[2])),
            l_rel: cfg.refine.then(|| mean_of(sums[3])),
            l_dr: cfg.refine.then(|| mean_of(sums[4])),
        };
        prev_prior_mean = report.l_prior.unwrap_or(0.0);
        epochs.push(report);
    }

    Ok(Stage2Train { model, epochs })
}

impl Stage2Model {
    /// Borrows the pieces the samplers need, switched per the configuration.
    pub fn sampler_ctx(&self) -> SamplerCtx<'_> {
        SamplerCtx {
            denoiser: &self.denoiser,
            latent: &self.latent,
            schedule: &self.schedule,
            ladder: &self.ladder,
            target: self.config.mode.gen_target(),
            t_obs: self.config.t_obs,
            refresh: self.config.refresh,
            use_latent: self.config.use_latent,
        }
    }

    /// Normalized goal vector for a raw return-to-go.
    pub fn goal_vector(&self, rtg: f64) -> [f64; 2] {
        match self.config.condition {
            ConditionKind::ReturnToGo => [(rtg - self.rtg_mean) / self.rtg_std, 1.0],
            ConditionKind::Unconditioned => [0.0, 0.0],
        }
    }

    /// Writes all parameters and identifying metadata; `extra_meta` entries
    /// (e.g. the provenance of the stage-1 checkpoint) are appended verbatim.
    pub fn save(&self, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
        let mut params = collect_params(&self.denoiser, "theta");
        for (name, t) in collect_params(&self.latent, "") {
            params.insert(name, t);
        }
        for (name, t) in self.latent.norm.to_tensors() {
            params.insert(name, t);
        }
        if let Some(idm) = &self.idm {
            for (name, t) in collect_params(idm, "idm") {
                params.insert(name, t);
            }
            for (name, t) in idm.stats_tensors() {
                params.insert(format!("idm.{name}"), t);
            }
        }

        let layout = self.latent.layout();
        let cfg = &self.config;
        let mut meta = vec![
            ("stage".to_string(), "2".to_string()),
            ("d_s".to_string(), layout.d_s.to_string()),
            ("d_a".to_string(), layout.d_a.to_string()),
            ("modality".to_string(), layout.modality.as_str().to_string()),
            ("latent_dim".to_string(), self.latent.latent_dim.to_string()),
            ("history_len".to_string(), self.latent.history_len.to_string()),
            (
                "include_future".to_string(),
                if self.latent.include_future { "1" } else { "0" }.to_string(),
            ),
            (
                "prior_input".to_string(),
                self.latent.prior_input.as_str().to_string(),
            ),
            ("mode".to_string(), cfg.mode.as_str().to_string()),
            ("t_plan".to_string(), cfg.t_plan.to_string()),
            ("t_exec".to_string(), cfg.t_exec.to_string()),
            ("t_obs".to_string(), cfg.t_obs.to_string()),
            ("k_max".to_string(), cfg.k_max.to_string()),
            ("beta_min".to_string(), cfg.beta_min.to_string()),
            ("beta_max".to_string(), cfg.beta_max.to_string()),
            ("lambda_prior".to_string(), cfg.lambda_prior.to_string()),
            ("lambda_rel".to_string(), cfg.lambda_rel.to_string()),
            ("margin_scale".to_string(), cfg.margin_scale.to_string()),
            ("condition".to_string(), cfg.condition.as_str().to_string()),
            (
                "guidance_dropout".to_string(),
                cfg.guidance_dropout.to_string(),
            ),
            ("schedule".to_string(), cfg.schedule.as_str().to_string()),
            ("refine".to_string(), if cfg.refine { "1" } else { "0" }.to_string()),
            ("refresh".to_string(), if cfg.refresh { "1" } else { "0" }.to_string()),
            (
                "use_latent".to_string(),
                if cfg.use_latent { "1" } else { "0" }.to_string(),
            ),
            ("epochs".to_string(), cfg.epochs.to_string()),
            ("lr".to_string(), cfg.lr.to_string()),
            ("batch_size".to_string(), cfg.batch_size.to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
            ("rtg_mean".to_string(), self.rtg_mean.to_string()),
            ("rtg_std".to_string(), self.rtg_std.to_string()),
            (
                "idm_latent".to_string(),
                match &self.idm {
                    None => "absent".to_string(),
                    Some(idm) => match idm.latent_dim {
                        None => "none".to_string(),
                        Some(d) => d.to_string(),
                    },
                },
            ),
        ];
        meta.extend_from_slice(extra_meta);
        save_checkpoint(path, &params, &meta)
    }

    /// Reads a checkpoint written by [`Stage2Model::save`]; returns the model
    /// and any metadata beyond the identifying fields.
    pub fn load(path: &Path) -> Result<(Stage2Model, Vec<(String, String)>)> {
        let (mut params, meta) = load_checkpoint(path)?;
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for (k, v) in &meta {
            fields.insert(k, v);
        }
        let get = |key: &str| -> Result<String> {
            fields
                .get(key)
                .map(|v| v.to_string())
                .ok_or_else(|| CoreError::format(format!("checkpoint lacks meta key {key:?}")))
        };
        if get("stage")? != "2" {
            return Err(CoreError::format("not a stage-2 checkpoint"));
        }
        let parse_usize = |s: String, key: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| CoreError::format(format!("meta {key} is not an integer")))
        };
        let parse_f64 = |s: String, key: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| CoreError::format(format!("meta {key} is not a number")))
        };
        let parse_bool = |s: String| s == "1";

        let latent = stage1_from_parts(&meta, &mut params)?;
        let cfg = Stage2Config {
            mode: PlanMode::parse(&get("mode")?)?,
            t_plan: parse_usize(get("t_plan")?, "t_plan")?,
            t_exec: parse_usize(get("t_exec")?, "t_exec")?,
            t_obs: parse_usize(get("t_obs")?, "t_obs")?,
            k_max: parse_usize(get("k_max")?, "k_max")?,
            beta_min: parse_f64(get("beta_min")?, "beta_min")?,
            beta_max: parse_f64(get("beta_max")?, "beta_max")?,
            lambda_prior: parse_f64(get("lambda_prior")?, "lambda_prior")?,
            lambda_rel: parse_f64(get("lambda_rel")?, "lambda_rel")?,
            margin_scale: parse_f64(get("margin_scale")?, "margin_scale")?,
            condition: ConditionKind::parse(&get("condition")?)?,
            guidance_dropout: parse_f64(get("guidance_dropout")?, "guidance_dropout")?,
            schedule: LevelSchedule::parse(&get("schedule")?)?,
            refine: parse_bool(get("refine")?),
            refresh: parse_bool(get("refresh")?),
            use_latent: parse_bool(get("use_latent")?),
            epochs: parse_usize(get("epochs")?, "epochs")?,
            lr: parse_f64(get("lr")?, "lr")?,
            batch_size: parse_usize(get("batch_size")?, "batch_size")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| CoreError::format("meta seed is not an integer"))?,
        };
        let layout = latent.layout();
        let frame_dim = cfg.mode.gen_target().frame_dim(layout.d_s, layout.d_a);
        let mut denoiser = DenoiserNet::init(
            &mut Rng::seed(0),
            frame_dim,
            latent.latent_dim,
            cfg.t_plan,
            layout.frame_dim(),
        );
        assign_params(&mut denoiser, "theta", &mut params)?;

        let idm = match get("idm_latent")?.as_str() {
            "absent" => None,
            spec => {
                let latent_dim = match spec {
                    "none" => None,
                    d => Some(parse_usize(d.to_string(), "idm_latent")?),
                };
                let mut idm = IdmNet::init(&mut Rng::seed(0), layout.d_s, layout.d_a, latent_dim);
                assign_params(&mut idm, "idm", &mut params)?;
                idm.set_stats(|name| {
                    params
                        .remove(&format!("idm.{name}"))
                        .ok_or_else(|| CoreError::format(format!("checkpoint lacks idm.{name}")))
                })?;
                Some(idm)
            }
        };
        if let Some(name) = params.keys().next() {
            return Err(CoreError::format(format!(
                "checkpoint holds unexpected tensor {name:?}"
            )));
        }

        let schedule = make_schedule(cfg.k_max, cfg.beta_min, cfg.beta_max)?;
        let ladder = causal_levels(cfg.t_plan, cfg.k_max)?;
        let model = Stage2Model {
            denoiser,
            latent,
            idm,
            config: cfg,
            schedule,
            ladder,
            rtg_mean: parse_f64(get("rtg_mean")?, "rtg_mean")?,
            rtg_std: parse_f64(get("rtg_std")?, "rtg_std")?,
        };

        let known = [
            "stage", "d_s", "d_a", "modality", "latent_dim", "history_len", "include_future",
            "prior_input", "mode", "t_plan", "t_exec", "t_obs", "k_max", "beta_min", "beta_max",
            "lambda_prior", "lambda_rel", "margin_scale", "condition", "guidance_dropout",
            "schedule", "refine", "refresh", "use_latent", "epochs", "lr", "batch_size", "seed",
            "rtg_mean", "rtg_std", "idm_latent",
        ];
        let extras = meta
            .iter()
            .filter(|(k, _)| !known.contains(&k.as_str()))
            .cloned()
            .collect();
        Ok((model, extras))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{generate_dataset_seeded, ContextProcess, EnvSpec};
    use crate::latentid::{train_stage1, Stage1Config};

    /// Small trained stage-1 over a lineargauss env plus its dataset.
    fn fixture() -> (Stage1Nets, Dataset) {
        let spec = EnvSpec::lineargauss_additive(
            0.5,
            1.0,
            1.0,
            0.1,
            ContextProcess::stepwise(0.5, 0.3, 0.4),
            30,
        );
        let data = generate_dataset_seeded(&spec, 4, 77).unwrap();
        let mut cfg = Stage1Config::new(5);
        cfg.history_len = 2;
        cfg.latent_dim = 2;
        cfg.epochs = 2;
        let nets = train_stage1(&data, &cfg).unwrap().nets;
        (nets, data)
    }

    fn small_cfg(mode: PlanMode) -> Stage2Config {
        let mut cfg = Stage2Config::new(mode, 9);
        cfg.t_plan = 3;
        cfg.t_exec = match mode {
            PlanMode::PlannerJoint => 3,
            PlanMode::PlannerStateIdm => 2,
            PlanMode::Policy => 1,
        };
        cfg.t_obs = 3;
        cfg.k_max = 6;
        cfg.epochs = 2;
        cfg.batch_size = 16;
        cfg
    }

    #[test]
    fn config_validation_rejects_contradictions() {
        let ok = small_cfg(PlanMode::PlannerJoint);
        assert!(ok.validate().is_ok());
        let mut c = ok.clone();
        c.t_exec = 4;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = small_cfg(PlanMode::PlannerStateIdm);
        c.t_exec = 3;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = small_cfg(PlanMode::Policy);
        assert!(c.validate().is_ok());
        c.t_exec = 2;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = small_cfg(PlanMode::Policy);
        c.refresh = true;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = ok.clone();
        c.guidance_dropout = 1.0;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = ok.clone();
        c.use_latent = false;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        c.refine = false;
        c.refresh = false;
        assert!(c.validate().is_ok());
        let mut c = ok.clone();
        c.t_plan = 7;
        c.t_exec = 7;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
        let mut c = ok;
        c.t_plan = 1;
        c.t_exec = 1;
        assert!(matches!(c.validate(), Err(CoreError::Config(_))));
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in [PlanMode::PlannerJoint, PlanMode::PlannerStateIdm, PlanMode::Policy] {
            assert_eq!(PlanMode::parse(mode.as_str()).unwrap(), mode);
        }
        for s in [LevelSchedule::Causal, LevelSchedule::Same, LevelSchedule::Random] {
            assert_eq!(LevelSchedule::parse(s.as_str()).unwrap(), s);
        }
        for c in [ConditionKind::ReturnToGo, ConditionKind::Unconditioned] {
            assert_eq!(ConditionKind::parse(c.as_str()).unwrap(), c);
        }
        assert!(PlanMode::parse("walker").is_err());
    }

    #[test]
    fn extraction_cuts_the_expected_anchors() {
        let (nets, data) = fixture();
        let cfg = small_cfg(PlanMode::PlannerJoint);
        let samples = extract_stage2(&data, &nets, &cfg).unwrap();
        // Each 30-step episode admits anchors 2..=25 (history needs two
        // observed steps before the anchor, the last block frame needs a
        // future frame for its window).
        assert_eq!(samples.len(), 4 * 24);
        let s = &samples[0];
        assert_eq!(s.hist.len(), 3);
        assert_eq!(s.clean.len(), 3);
        assert_eq!(s.windows.len(), 4);
        for w in &s.windows {
            assert_eq!(w.len(), nets.history_len + 2);
        }
        // First anchor of the first episode is t = 2.
        let ep = &data.episodes[0];
        let expect_rtg: f64 = ep[3..].iter().map(|r| r.r).sum();
        assert!((s.rtg - expect_rtg).abs() < 1e-12);
        let layout = nets.layout();
        let last_hist = nets.norm.normalize(&layout.frame_of(&ep[2])).unwrap();
        assert_eq!(s.hist[2], last_hist);
        let first_clean = nets
            .norm
            .normalize(&GenTarget::Joint.frame_of(&ep[3].s, &ep[3].a))
            .unwrap();
        assert_eq!(s.clean[0], first_clean);
    }

    /// Context for one-off loss evaluations.
    struct Probe {
        cfg: Stage2Config,
        schedule: NoiseSchedule,
        ladder: BlockLevels,
        sample: Stage2Sample,
        c_prev: Vec<f64>,
    }

    fn probe_setup(nets: &Stage1Nets, data: &Dataset, cfg: Stage2Config) -> Probe {
        let samples = extract_stage2(data, nets, &cfg).unwrap();
        let schedule = make_schedule(cfg.k_max, cfg.beta_min, cfg.beta_max).unwrap();
        let ladder = causal_levels(cfg.t_plan, cfg.k_max).unwrap();
        let sample = samples.into_iter().next().unwrap();
        let c_prev = posterior_infer_scaled(nets, &sample.windows[0])
            .unwrap()
            .sample(&mut Rng::seed(4));
        Probe { cfg, schedule, ladder, sample, c_prev }
    }

    #[test]
    fn zero_denoiser_margin_loss_is_log_two() {
        let (nets, data) = fixture();
        let p = probe_setup(&nets, &data, small_cfg(PlanMode::PlannerJoint));
        let mut den =
            DenoiserNet::init(&mut Rng::seed(3), 2, nets.latent_dim, 3, nets.layout().frame_dim());
        den.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        let ctx = RefineCtx {
            denoiser: &den,
            frozen: None,
            latent: &nets,
            cfg: &p.cfg,
            schedule: &p.schedule,
            ladder: &p.ladder,
        };
        let probe = refine_losses(
            &ctx,
            &p.sample,
            &p.c_prev,
            [0.4, 1.0],
            0.0,
            &RefineOpts::default(),
            &mut Rng::seed(1),
        )
        .unwrap();
        let r = probe.report;
        // A constant predictor scores identically under both latent sets, so
        // with zero margin the relational loss sits at its balance point.
        assert_eq!(r.l_post.unwrap(), r.l_prior.unwrap());
        assert!((r.l_rel.unwrap() - 2.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_weights_reduce_the_refined_loss_to_the_posterior_term() {
        let (nets, data) = fixture();
        let mut cfg = small_cfg(PlanMode::PlannerJoint);
        cfg.lambda_prior = 0.0;
        cfg.lambda_rel = 0.0;
        let p = probe_setup(&nets, &data, cfg);
        let den =
            DenoiserNet::init(&mut Rng::seed(3), 2, nets.latent_dim, 3, nets.layout().frame_dim());
        let ctx = RefineCtx {
            denoiser: &den,
            frozen: None,
            latent: &nets,
            cfg: &p.cfg,
            schedule: &p.schedule,
            ladder: &p.ladder,
        };
        let r = refine_losses(
            &ctx,
            &p.sample,
            &p.c_prev,
            [0.4, 1.0],
            0.05,
            &RefineOpts::default(),
            &mut Rng::seed(2),
        )
        .unwrap()
        .report;
        assert_eq!(r.l_dr.unwrap(), r.l_post.unwrap());
    }

    #[test]
    fn level_schedules_assign_expected_levels() {
        let (nets, data) = fixture();
        let den =
            DenoiserNet::init(&mut Rng::seed(3), 2, nets.latent_dim, 3, nets.layout().frame_dim());
        let run = |schedule: LevelSchedule, seed: u64| {
            let mut cfg = small_cfg(PlanMode::PlannerJoint);
            cfg.schedule = schedule;
            let p = probe_setup(&nets, &data, cfg);
            let ctx = RefineCtx {
                denoiser: &den,
                frozen: None,
                latent: &nets,
                cfg: &p.cfg,
                schedule: &p.schedule,
                ladder: &p.ladder,
            };
            refine_losses(
                &ctx,
                &p.sample,
                &p.c_prev,
                [0.0, 1.0],
                0.0,
                &RefineOpts::default(),
                &mut Rng::seed(seed),
            )
            .unwrap()
            .levels
        };
        assert_eq!(run(LevelSchedule::Causal, 1), vec![2, 4, 6]);
        assert_eq!(run(LevelSchedule::Same, 1), vec![3, 3, 3]);
        let a = run(LevelSchedule::Random, 1);
        let b = run(LevelSchedule::Random, 2);
        assert!(a.iter().all(|&l| (1..=6).contains(&l)));
        assert_ne!(a, b);
        assert_eq!(a, run(LevelSchedule::Random, 1));
    }

    fn nudge(net: &mut dyn ParamVisit, target: &str, idx: usize, eps: f64) {
        net.visit_mut("", &mut |name, t| {
            if name == target {
                t.data_mut()[idx] += eps;
            }
        });
    }

    fn pick(grads: &BTreeMap<String, Vec<f64>>, prefix: &str) -> (String, usize, f64) {
        let mut best = (String::new(), 0usize, 0.0f64);
        for (name, g) in grads {
            if !name.starts_with(prefix) {
                continue;
            }
            for (i, &v) in g.iter().enumerate() {
                if v.abs() > best.2.abs() {
                    best = (name.clone(), i, v);
                }
            }
        }
        assert!(best.2 != 0.0, "no gradient under {prefix}");
        best
    }

    fn all_zero(grads: &BTreeMap<String, Vec<f64>>, prefix: &str) -> bool {
        grads
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .all(|(_, g)| g.iter().all(|&v| v == 0.0))
    }

    #[test]
    fn loss_terms_reach_only_their_parameter_groups() {
        let (nets, data) = fixture();
        let p = probe_setup(&nets, &data, small_cfg(PlanMode::PlannerJoint));
        let den =
            DenoiserNet::init(&mut Rng::seed(3), 2, nets.latent_dim, 3, nets.layout().frame_dim());
        let ctx = RefineCtx {
            denoiser: &den,
            frozen: None,
            latent: &nets,
            cfg: &p.cfg,
            schedule: &p.schedule,
            ladder: &p.ladder,
        };
        let opts = RefineOpts { per_term: true, ..RefineOpts::default() };
        let probe =
            refine_losses(&ctx, &p.sample, &p.c_prev, [0.4, 1.0], 0.02, &opts, &mut Rng::seed(11))
                .unwrap();
        assert!(all_zero(&probe.grads_diff, "psi."));
        assert!(all_zero(&probe.grads_diff, "phi."));
        assert!(all_zero(&probe.grads_post, "phi."));
        assert!(all_zero(&probe.grads_post, "theta."));
        assert!(all_zero(&probe.grads_prior, "psi."));
        assert!(all_zero(&probe.grads_prior, "theta."));
        assert!(all_zero(&probe.grads_rel, "theta."));
        assert!(all_zero(&probe.grads_rel, "phi."));
        assert!(!all_zero(&probe.grads_diff, "theta."));
        assert!(!all_zero(&probe.grads_post, "psi."));
        assert!(!all_zero(&probe.grads_prior, "phi."));
        assert!(!all_zero(&probe.grads_rel, "psi."));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (nets, data) = fixture();
        let p = probe_setup(&nets, &data, small_cfg(PlanMode::PlannerJoint));
        let den =
            DenoiserNet::init(&mut Rng::seed(3), 2, nets.latent_dim, 3, nets.layout().frame_dim());
        let den_base = den.clone();
        let seed = 11;
        let margin = 0.02;
        let y = [0.4, 1.0];

        let base = {
            let ctx = RefineCtx {
                denoiser: &den,
                frozen: Some(&den_base),
                latent: &nets,
                cfg: &p.cfg,
                schedule: &p.schedule,
                ladder: &p.ladder,
            };
            let opts = RefineOpts { per_term: true, ..RefineOpts::default() };
            refine_losses(&ctx, &p.sample, &p.c_prev, y, margin, &opts, &mut Rng::seed(seed))
                .unwrap()
        };
        // Re-evaluations pin what the loss stop-grads: the denoising loss's
        // conditioning latents and the log prior loss inside the margin.
        let opts = RefineOpts {
            per_term: false,
            post_override: Some(base.post_latents.clone()),
            prior_log_pin: base.prior_log_pin,
        };
        let eval = |den2: &DenoiserNet, nets2: &Stage1Nets| -> LossReport {
            let ctx = RefineCtx {
                denoiser: den2,
                frozen: Some(&den_base),
                latent: nets2,
                cfg: &p.cfg,
                schedule: &p.schedule,
                ladder: &p.ladder,
            };
            refine_losses(&ctx, &p.sample, &p.c_prev, y, margin, &opts, &mut Rng::seed(seed))
                .unwrap()
                .report
        };
        let h = 1e-5;
        let close = |fd: f64, g: f64| {
            let rel = (fd - g).abs() / (g.abs() + 1e-8);
            assert!(rel < 1e-4, "finite difference {fd} vs gradient {g}");
        };

        let (name, idx, g) = pick(&base.grads_diff, "theta.");
        let local = name.strip_prefix("theta.").unwrap();
        let at = |eps: f64| {
            let mut d2 = den.clone();
            nudge(&mut d2, local, idx, eps);
            eval(&d2, &nets).l_diff
        };
        close((at(h) - at(-h)) / (2.0 * h), g);

        let (name, idx, g_post) = pick(&base.grads_post, "psi.");
        let g_rel = base.grads_rel[&name][idx];
        let local = name.strip_prefix("psi.").unwrap();
        let at = |eps: f64| {
            let mut n2 = nets.clone();
            nudge(&mut n2.post, local, idx, eps);
            let r = eval(&den, &n2);
            (r.l_post.unwrap(), r.l_rel.unwrap())
        };
        let (up_post, up_rel) = at(h);
        let (dn_post, dn_rel) = at(-h);
        close((up_post - dn_post) / (2.0 * h), g_post);
        close((up_rel - dn_rel) / (2.0 * h), g_rel);

        let (name, idx, g_prior) = pick(&base.grads_prior, "phi.");
        let local = name.strip_prefix("phi.").unwrap();
        let at = |eps: f64| {
            let mut n2 = nets.clone();
            nudge(&mut n2.prior, local, idx, eps);
            let r = eval(&den, &n2);
            (r.l_prior.unwrap(), r.l_rel.unwrap())
        };
        let (up_prior, up_rel) = at(h);
        let (dn_prior, dn_rel) = at(-h);
        close((up_prior - dn_prior) / (2.0 * h), g_prior);
        // The margin stop-grads the prior loss, so its pinned re-evaluation
        // must not move at all.
        assert_eq!(up_rel, dn_rel);
    }

    fn params_of(net: &dyn ParamVisit) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        net.visit("", &mut |name, t| {
            out.insert(name.to_string(), t.data().to_vec());
        });
        out
    }

    #[test]
    fn training_is_deterministic_and_refines_the_heads() {
        let (nets, data) = fixture();
        let mut cfg = small_cfg(PlanMode::PlannerJoint);
        cfg.epochs = 4;
        let a = train_stage2(&data, &nets, &cfg).unwrap();
        let b = train_stage2(&data, &nets, &cfg).unwrap();
        assert_eq!(params_of(&a.model.denoiser), params_of(&b.model.denoiser));
        assert_eq!(params_of(&a.model.latent), params_of(&b.model.latent));
        assert_eq!(a.epochs.len(), 4);
        assert!(a.epochs.iter().all(|r| r.l_diff.is_finite()));
        assert!(
            a.epochs[3].l_diff < a.epochs[0].l_diff,
            "denoising loss did not improve: {} -> {}",
            a.epochs[0].l_diff,
            a.epochs[3].l_diff
        );
        // Refinement moved the recognition and prediction heads.
        assert_ne!(params_of(&a.model.latent.post), params_of(&nets.post));
        assert_ne!(params_of(&a.model.latent.prior), params_of(&nets.prior));
        // The decoder rides along untouched.
        assert_eq!(params_of(&a.model.latent.dec), params_of(&nets.dec));
    }

    #[test]
    fn refine_off_leaves_the_stage1_heads_untouched() {
        let (nets, data) = fixture();
        let mut cfg = small_cfg(PlanMode::PlannerJoint);
        cfg.refine = false;
        let out = train_stage2(&data, &nets, &cfg).unwrap();
        assert_eq!(params_of(&out.model.latent), params_of(&nets));
        assert!(out.epochs[0].l_post.is_none());
        assert!(out.epochs[0].l_dr.is_none());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let (nets, data) = fixture();
        let cfg = small_cfg(PlanMode::PlannerJoint);
        let mut model = train_stage2(&data, &nets, &cfg).unwrap().model;
        model.idm = Some(IdmNet::init(&mut Rng::seed(8), 1, 1, Some(2)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage2.ckpt");
        let meta = [("origin".to_string(), "fixture".to_string())];
        model.save(&path, &meta).unwrap();
        let (back, extras) = Stage2Model::load(&path).unwrap();
        assert_eq!(extras, meta.to_vec());
        assert_eq!(back.config, model.config);
        assert_eq!(params_of(&back.denoiser), params_of(&model.denoiser));
        assert_eq!(params_of(&back.latent), params_of(&model.latent));
        let idm_a = back.idm.as_ref().unwrap();
        let idm_b = model.idm.as_ref().unwrap();
        assert_eq!(params_of(idm_a), params_of(idm_b));
        for ((na, ta), (nb, tb)) in idm_a.stats_tensors().iter().zip(idm_b.stats_tensors().iter())
        {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(back.rtg_mean.to_bits(), model.rtg_mean.to_bits());
        assert_eq!(back.rtg_std.to_bits(), model.rtg_std.to_bits());
        assert_eq!(back.ladder.as_slice(), model.ladder.as_slice());
    }

    #[test]
    fn latent_free_training_runs_without_stage1_heads() {
        let (nets, data) = fixture();
        let mut cfg = small_cfg(PlanMode::PlannerJoint);
        cfg.use_latent = false;
        cfg.refine = false;
        cfg.refresh = false;
        let out = train_stage2(&data, &nets, &cfg).unwrap();
        assert!(out.epochs.iter().all(|r| r.l_diff.is_finite()));
        assert_eq!(params_of(&out.model.latent), params_of(&nets));
    }
}
