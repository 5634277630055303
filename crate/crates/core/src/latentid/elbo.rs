//! The Stage-1 objective and training loop: per-window reconstruction plus a
//! KL term tying the window posterior to the latent-transition prior, with
//! posterior samples chained across consecutive windows of the same episode.


use crate::envsim::Dataset;
use crate::error::{CoreError, Result};
use crate::latentid::block::{
    extract_blocks, extract_blocks_history_only, BlockWindow, FrameLayout, Modality, Normalizer,
};
use crate::latentid::nets::{PriorInput, Stage1Nets};
use crate::numerics::{gaussian_kl, reparam_sample, AdamState, BindIndex, GradAccum, Rng, Tape};

/// Hyperparameters for Stage-1 training.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    /// Number of history frames before the anchor (window spans this + 2).
    pub history_len: usize,
    pub latent_dim: usize,
    pub kl_weight: f64,
    pub lr: f64,
    /// Optimizer steps cover at least this many windows (whole episodes).
    pub batch_windows: usize,
    pub epochs: usize,
    pub modality: Modality,
    /// When false, windows stop at the anchor (the history-only ablation).
    pub include_future: bool,
    pub prior_input: PriorInput,
    pub seed: u64,
}

impl Stage1Config {
    pub fn new(seed: u64) -> Stage1Config {
        Stage1Config {
            history_len: 6,
            latent_dim: 4,
            kl_weight: 0.01,
            lr: 3e-4,
            batch_windows: 128,
            epochs: 30,
            modality: Modality::StatesActions,
            include_future: true,
            prior_input: PriorInput::Sample,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_len < 2 {
            return Err(CoreError::config("history length must be >= 2"));
        }
        if self.latent_dim == 0 {
            return Err(CoreError::config("latent dim must be >= 1"));
        }
        if self.kl_weight <= 0.0 {
            return Err(CoreError::config("KL weight must be > 0"));
        }
        if self.lr <= 0.0 {
            return Err(CoreError::config("learning rate must be > 0"));
        }
        if self.batch_windows == 0 {
            return Err(CoreError::config("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// Averaged loss values of one pass: `total = recon + kl_weight * kl`, with
/// the components reported unweighted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// Evaluates the objective over `windows` without updating anything. The rng
/// drives the per-window reparameterized samples.
pub fn elbo_loss(
    nets: &Stage1Nets,
    windows: &[BlockWindow],
    kl_weight: f64,
    rng: &mut Rng,
) -> Result<ElboTerms> {
    if windows.is_empty() {
        return Err(CoreError::contract("elbo needs a nonempty batch"));
    }
    let refs: Vec<&BlockWindow> = windows.iter().collect();
    run_batch(nets, &refs, kl_weight, rng, None)
}

/// One pass over a batch; when `acc` is given, per-window gradients of the
/// total loss are accumulated into it.
fn run_batch(
    nets: &Stage1Nets,
    windows: &[&BlockWindow],
    kl_weight: f64,
    rng: &mut Rng,
    mut acc: Option<&mut GradAccum>,
) -> Result<ElboTerms> {
    let layout = nets.layout();
    let d_c = nets.latent_dim;
    let mut chain: Option<(usize, usize, Vec<f64>)> = None;
    let (mut total_sum, mut recon_sum, mut kl_sum) = (0.0, 0.0, 0.0);

    for w in windows {
        let c_prev = match &chain {
            Some((ep, anchor, z)) if *ep == w.episode && anchor + 1 == w.anchor => z.clone(),
            _ => vec![0.0; d_c],
        };

        let mut tape = Tape::new();
        let mut ix = BindIndex::new();
        let vars = nets.bind_all(&mut tape, &mut ix, false, false, false)?;

        let mut frames = Vec::with_capacity(w.frames.len());
        for f in &w.frames {
            frames.push(tape.constant_vec(nets.norm.normalize(f)?)?);
        }
        let q = vars.post.forward(&mut tape, &frames)?;
        let z = reparam_sample(&mut tape, q.mean, q.logvar, rng)?;

        let c_prev_node = tape.constant_vec(c_prev)?;
        let p = vars.prior.forward(&mut tape, c_prev_node)?;
        let kl = gaussian_kl(&mut tape, q.mean, q.logvar, p.mean, p.logvar)?;

        let prev = nets.norm.normalize(w.prev_frame())?;
        let s_prev = tape.constant_vec(prev[..layout.d_s].to_vec())?;
        let a_prev = if layout.modality.has_actions() {
            let lo = layout.action_start();
            Some(tape.constant_vec(prev[lo..lo + layout.d_a].to_vec())?)
        } else {
            None
        };
        let (s_pred, r_pred) = vars.dec.forward(&mut tape, s_prev, a_prev, z)?;

        let anchor = nets.norm.normalize(w.anchor_frame())?;
        let s_tgt = tape.constant_vec(anchor[..layout.d_s].to_vec())?;
        let diff = tape.sub(s_pred, s_tgt)?;
        let sq = tape.square(diff)?;
        let mut recon = tape.sum(sq)?;
        if let Some(r_pred) = r_pred {
            let r_tgt = tape.constant_vec(vec![anchor[layout.reward_index()]])?;
            let r_diff = tape.sub(r_pred, r_tgt)?;
            let r_sq = tape.square(r_diff)?;
            let r_term = tape.sum(r_sq)?;
            recon = tape.add(recon, r_term)?;
        }

        let kl_scaled = tape.scale(kl, kl_weight)?;
        let total = tape.add(recon, kl_scaled)?;

        let total_v = tape.value_scalar(total)?;
        if !total_v.is_finite() {
            return Err(CoreError::numeric("elbo loss is not finite"));
        }
        total_sum += total_v;
        recon_sum += tape.value_scalar(recon)?;
        kl_sum += tape.value_scalar(kl)?;

        if let Some(acc) = acc.as_deref_mut() {
            let grads = tape.backward(total)?;
            acc.add(&ix.gather(&grads));
        }

        let carried = match nets.prior_input {
            PriorInput::Sample => tape.value(z)?.to_vec(),
            PriorInput::Mean => tape.value(q.mean)?.to_vec(),
        };
        chain = Some((w.episode, w.anchor, carried));
    }

    let n = windows.len() as f64;
    Ok(ElboTerms {
        total: total_sum / n,
        recon: recon_sum / n,
        kl: kl_sum / n,
    })
}

/// A trained Stage-1 model with its per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct Stage1Train {
    pub nets: Stage1Nets,
    pub history: Vec<ElboTerms>,
    pub skipped_episodes: usize,
}

/// Trains the Stage-1 networks on a dataset. Deterministic in the config
/// seed; a non-finite loss aborts with the failing epoch in the error.
pub fn train_stage1(dataset: &Dataset, config: &Stage1Config) -> Result<Stage1Train> {
    dataset.validate()?;
    config.validate()?;
    let layout = FrameLayout::new(dataset.spec.d_s, dataset.spec.d_a, config.modality);
    let master = Rng::seed(config.seed);

    let mut init_rng = master.derive(0);
    let mut nets = Stage1Nets::init(
        &mut init_rng,
        layout,
        config.latent_dim,
        config.history_len,
        config.include_future,
        config.prior_input,
    );
    nets.norm = Normalizer::fit(dataset, config.modality)?;

    let extraction = if config.include_future {
        extract_blocks(dataset, config.history_len, config.modality)?
    } else {
        extract_blocks_history_only(dataset, config.history_len, config.modality)?
    };
    if extraction.windows.is_empty() {
        return Err(CoreError::contract(
            "no training windows: every episode is shorter than the block span",
        ));
    }
    // Group windows per episode; a batch covers whole episodes so posterior
    // chains never break mid-episode.
    let mut episodes: Vec<Vec<&BlockWindow>> = Vec::new();
    for w in &extraction.windows {
        match episodes.last_mut() {
            Some(ep) if ep[0].episode == w.episode => ep.push(w),
            _ => episodes.push(vec![w]),
        }
    }

    let mut adam = AdamState::new(config.lr);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = master.derive(1 + epoch as u64);
        let mut order: Vec<usize> = (0..episodes.len()).collect();
        rng.shuffle(&mut order);

        let at_epoch = |e: CoreError| match e {
            CoreError::Numeric(msg) => CoreError::numeric(format!("epoch {epoch}: {msg}")),
            other => other,
        };

        let (mut totals, mut recons, mut kls, mut batches) = (0.0, 0.0, 0.0, 0.0);
        let mut cursor = 0;
        while cursor < order.len() {
            let mut batch: Vec<&BlockWindow> = Vec::new();
            while cursor < order.len() && batch.len() < config.batch_windows {
                batch.extend(episodes[order[cursor]].iter().copied());
                cursor += 1;
            }
            let mut acc = GradAccum::new();
            let terms = run_batch(&nets, &batch, config.kl_weight, &mut rng, Some(&mut acc))
                .map_err(at_epoch)?;
            adam.step(&mut nets, "", &acc.mean()).map_err(at_epoch)?;
            totals += terms.total;
            recons += terms.recon;
            kls += terms.kl;
            batches += 1.0;
        }
        history.push(ElboTerms {
            total: totals / batches,
            recon: recons / batches,
            kl: kls / batches,
        });
    }

    Ok(Stage1Train {
        nets,
        history,
        skipped_episodes: extraction.skipped_episodes,
    })
}
