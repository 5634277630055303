//! Stage-1 networks: a window posterior (per-modality embeddings, MLP trunk,
//! GRU, Gaussian head), a latent-transition prior, and frame decoders, plus
//! their checkpoint round-trip.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::latentid::block::{BlockWindow, FrameLayout, Modality, Normalizer};
use crate::numerics::{
    assign_params, collect_params, load_checkpoint, save_checkpoint, scoped, BindIndex, Dense,
    DenseVars, Gru, GruVars, Mlp, MlpVars, ParamVisit, Rng, Tape, Tensor, VarId,
};

pub const LOGVAR_LO: f64 = -10.0;
pub const LOGVAR_HI: f64 = 10.0;

const EMBED_DIM: usize = 16;
const TRUNK_WIDTH: usize = 64;
const GRU_HIDDEN: usize = 64;
const PRIOR_WIDTH: usize = 32;
const DEC_WIDTH: usize = 64;

/// Diagonal Gaussian belief over the latent context.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBelief {
    pub mean: Vec<f64>,
    pub logvar: Vec<f64>,
}

impl LatentBelief {
    pub fn new(mean: Vec<f64>, logvar: Vec<f64>) -> Result<LatentBelief> {
        if mean.len() != logvar.len() {
            return Err(CoreError::shape(format!(
                "belief mean has {} dims, logvar {}",
                mean.len(),
                logvar.len()
            )));
        }
        if !mean.iter().chain(&logvar).all(|v| v.is_finite()) {
            return Err(CoreError::numeric("belief holds non-finite values"));
        }
        if logvar
            .iter()
            .any(|&v| !(LOGVAR_LO - 1e-9..=LOGVAR_HI + 1e-9).contains(&v))
        {
            return Err(CoreError::contract("belief logvar escapes the clamp range"));
        }
        Ok(LatentBelief { mean, logvar })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// One draw from the belief.
    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.logvar)
            .map(|(m, lv)| m + (lv / 2.0).exp() * rng.normal())
            .collect()
    }
}

/// What the latent-transition prior is fed when chaining across steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorInput {
    /// The previous step's reparameterized posterior sample (default).
    Sample,
    /// The previous posterior mean.
    Mean,
}

impl PriorInput {
    pub fn as_str(&self) -> &'static str {
        match self {
            PriorInput::Sample => "sample",
            PriorInput::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<PriorInput> {
        match s {
            "sample" => Ok(PriorInput::Sample),
            "mean" => Ok(PriorInput::Mean),
            other => Err(CoreError::config(format!("unknown prior input {other:?}"))),
        }
    }
}

/// Gaussian belief as tape nodes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BeliefNodes {
    pub mean: VarId,
    pub logvar: VarId,
}

impl BeliefNodes {
    pub fn to_belief(&self, tape: &Tape) -> Result<LatentBelief> {
        LatentBelief::new(
            tape.value(self.mean)?.to_vec(),
            tape.value(self.logvar)?.to_vec(),
        )
    }
}

/// Shared Gaussian output head: affine map to `2 * latent_dim`, split into
/// mean and clamped logvar.
fn gaussian_head(
    tape: &mut Tape,
    head: &DenseVars,
    x: VarId,
    latent_dim: usize,
) -> Result<BeliefNodes> {
    let out = head.forward(tape, x)?;
    let mean = tape.slice(out, 0, latent_dim)?;
    let lv = tape.slice(out, latent_dim, latent_dim)?;
    let logvar = tape.clamp(lv, LOGVAR_LO, LOGVAR_HI)?;
    Ok(BeliefNodes { mean, logvar })
}

// ── posterior ────────────────────────────────────────────────────────────────

/// Window encoder: embeds each frame's modalities, fuses them through an MLP,
/// scans the window with a GRU (oldest frame first), and reads a Gaussian
/// belief off the final hidden state.
#[derive(Debug, Clone)]
pub struct PosteriorNet {
    layout: FrameLayout,
    latent_dim: usize,
    embed_s: Dense,
    embed_a: Option<Dense>,
    embed_r: Option<Dense>,
    trunk: Mlp,
    gru: Gru,
    head: Dense,
}

impl PosteriorNet {
    pub fn init(rng: &mut Rng, layout: FrameLayout, latent_dim: usize) -> PosteriorNet {
        let n_mod = 1
            + usize::from(layout.modality.has_actions())
            + usize::from(layout.modality.has_reward());
        PosteriorNet {
            layout,
            latent_dim,
            embed_s: Dense::init(rng, layout.d_s, EMBED_DIM),
            embed_a: layout
                .modality
                .has_actions()
                .then(|| Dense::init(rng, layout.d_a, EMBED_DIM)),
            embed_r: layout
                .modality
                .has_reward()
                .then(|| Dense::init(rng, 1, EMBED_DIM)),
            trunk: Mlp::init(rng, &[n_mod * EMBED_DIM, TRUNK_WIDTH, TRUNK_WIDTH]),
            gru: Gru::init(rng, TRUNK_WIDTH, GRU_HIDDEN),
            head: Dense::init(rng, GRU_HIDDEN, 2 * latent_dim),
        }
    }

    pub(crate) fn bind(
        &self,
        tape: &mut Tape,
        ix: &mut BindIndex,
        prefix: &str,
        freeze: bool,
    ) -> Result<PosteriorVars> {
        Ok(PosteriorVars {
            layout: self.layout,
            latent_dim: self.latent_dim,
            embed_s: self.embed_s.bind(tape, ix, &scoped(prefix, "embed_s"), freeze)?,
            embed_a: match &self.embed_a {
                Some(e) => Some(e.bind(tape, ix, &scoped(prefix, "embed_a"), freeze)?),
                None => None,
            },
            embed_r: match &self.embed_r {
                Some(e) => Some(e.bind(tape, ix, &scoped(prefix, "embed_r"), freeze)?),
                None => None,
            },
            trunk: self.trunk.bind(tape, ix, &scoped(prefix, "trunk"), freeze)?,
            gru: self.gru.bind(tape, ix, &scoped(prefix, "gru"), freeze)?,
            head: self.head.bind(tape, ix, &scoped(prefix, "head"), freeze)?,
        })
    }
}

impl ParamVisit for PosteriorNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.embed_s.visit(&scoped(prefix, "embed_s"), f);
        if let Some(e) = &self.embed_a {
            e.visit(&scoped(prefix, "embed_a"), f);
        }
        if let Some(e) = &self.embed_r {
            e.visit(&scoped(prefix, "embed_r"), f);
        }
        self.trunk.visit(&scoped(prefix, "trunk"), f);
        self.gru.visit(&scoped(prefix, "gru"), f);
        self.head.visit(&scoped(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.embed_s.visit_mut(&scoped(prefix, "embed_s"), f);
        if let Some(e) = &mut self.embed_a {
            e.visit_mut(&scoped(prefix, "embed_a"), f);
        }
        if let Some(e) = &mut self.embed_r {
            e.visit_mut(&scoped(prefix, "embed_r"), f);
        }
        self.trunk.visit_mut(&scoped(prefix, "trunk"), f);
        self.gru.visit_mut(&scoped(prefix, "gru"), f);
        self.head.visit_mut(&scoped(prefix, "head"), f);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PosteriorVars {
    layout: FrameLayout,
    latent_dim: usize,
    embed_s: DenseVars,
    embed_a: Option<DenseVars>,
    embed_r: Option<DenseVars>,
    trunk: MlpVars,
    gru: GruVars,
    head: DenseVars,
}

impl PosteriorVars {
    /// Encodes a window of normalized frame nodes, oldest first.
    pub fn forward(&self, tape: &mut Tape, frames: &[VarId]) -> Result<BeliefNodes> {
        if frames.is_empty() {
            return Err(CoreError::contract("posterior needs at least one frame"));
        }
        let mut inputs = Vec::with_capacity(frames.len());
        for &frame in frames {
            if tape.value(frame)?.len() != self.layout.frame_dim() {
                return Err(CoreError::shape(format!(
                    "frame has {} dims, modality expects {}",
                    tape.value(frame)?.len(),
                    self.layout.frame_dim()
                )));
            }
            let s = tape.slice(frame, 0, self.layout.d_s)?;
            let mut parts = vec![self.embed_s.forward(tape, s)?];
            if let Some(embed_a) = &self.embed_a {
                let a = tape.slice(frame, self.layout.action_start(), self.layout.d_a)?;
                parts.push(embed_a.forward(tape, a)?);
            }
            if let Some(embed_r) = &self.embed_r {
                let r = tape.slice(frame, self.layout.reward_index(), 1)?;
                parts.push(embed_r.forward(tape, r)?);
            }
            let fused = tape.concat(&parts)?;
            let fused = self.trunk.forward(tape, fused)?;
            inputs.push(tape.relu(fused)?);
        }
        let h0 = tape.constant_vec(vec![0.0; GRU_HIDDEN])?;
        let hs = self.gru.forward_seq(tape, &inputs, h0)?;
        let last = hs[hs.len() - 1];
        gaussian_head(tape, &self.head, last, self.latent_dim)
    }
}

// ── prior ────────────────────────────────────────────────────────────────────

/// Latent-transition prior: maps the previous latent to a Gaussian belief
/// over the current one.
#[derive(Debug, Clone)]
pub struct PriorNet {
    latent_dim: usize,
    trunk: Mlp,
    head: Dense,
}

impl PriorNet {
    pub fn init(rng: &mut Rng, latent_dim: usize) -> PriorNet {
        PriorNet {
            latent_dim,
            trunk: Mlp::init(rng, &[latent_dim, PRIOR_WIDTH, PRIOR_WIDTH]),
            head: Dense::init(rng, PRIOR_WIDTH, 2 * latent_dim),
        }
    }

    pub(crate) fn bind(
        &self,
        tape: &mut Tape,
        ix: &mut BindIndex,
        prefix: &str,
        freeze: bool,
    ) -> Result<PriorVars> {
        Ok(PriorVars {
            latent_dim: self.latent_dim,
            trunk: self.trunk.bind(tape, ix, &scoped(prefix, "trunk"), freeze)?,
            head: self.head.bind(tape, ix, &scoped(prefix, "head"), freeze)?,
        })
    }
}

impl ParamVisit for PriorNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.trunk.visit(&scoped(prefix, "trunk"), f);
        self.head.visit(&scoped(prefix, "head"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.trunk.visit_mut(&scoped(prefix, "trunk"), f);
        self.head.visit_mut(&scoped(prefix, "head"), f);
    }
}

#[derive(Debug, Clone)]
pub(crate) struct PriorVars {
    latent_dim: usize,
    trunk: MlpVars,
    head: DenseVars,
}

impl PriorVars {
    pub fn forward(&self, tape: &mut Tape, c_prev: VarId) -> Result<BeliefNodes> {
        if tape.value(c_prev)?.len() != self.latent_dim {
            return Err(CoreError::shape(format!(
                "prior input has {} dims, latent dim is {}",
                tape.value(c_prev)?.len(),
                self.latent_dim
            )));
        }
        let h = self.trunk.forward(tape, c_prev)?;
        let h = tape.relu(h)?;
        gaussian_head(tape, &self.head, h, self.latent_dim)
    }
}

// ── decoder ──────────────────────────────────────────────────────────────────

/// Frame decoder: predicts the anchor state (and, when rewards are observed,
/// the anchor reward) from the previous frame and the latent context.
#[derive(Debug, Clone)]
pub struct DecoderNet {
    takes_actions: bool,
    state: Mlp,
    reward: Option<Mlp>,
}

impl DecoderNet {
    pub fn init(rng: &mut Rng, layout: FrameLayout, latent_dim: usize) -> DecoderNet {
        let takes_actions = layout.modality.has_actions();
        let in_dim = layout.d_s + if takes_actions { layout.d_a } else { 0 } + latent_dim;
        DecoderNet {
            takes_actions,
            state: Mlp::init(rng, &[in_dim, DEC_WIDTH, DEC_WIDTH, layout.d_s]),
            reward: layout
                .modality
                .has_reward()
                .then(|| Mlp::init(rng, &[in_dim, DEC_WIDTH, DEC_WIDTH, 1])),
        }
    }

    pub fn has_reward_head(&self) -> bool {
        self.reward.is_some()
    }

    pub(crate) fn bind(
        &self,
        tape: &mut Tape,
        ix: &mut BindIndex,
        prefix: &str,
        freeze: bool,
    ) -> Result<DecoderVars> {
        Ok(DecoderVars {
            takes_actions: self.takes_actions,
            state: self.state.bind(tape, ix, &scoped(prefix, "state"), freeze)?,
            reward: match &self.reward {
                Some(r) => Some(r.bind(tape, ix, &scoped(prefix, "reward"), freeze)?),
                None => None,
            },
        })
    }
}

impl ParamVisit for DecoderNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.state.visit(&scoped(prefix, "state"), f);
        if let Some(r) = &self.reward {
            r.visit(&scoped(prefix, "reward"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.state.visit_mut(&scoped(prefix, "state"), f);
        if let Some(r) = &mut self.reward {
            r.visit_mut(&scoped(prefix, "reward"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderVars {
    takes_actions: bool,
    state: MlpVars,
    reward: Option<MlpVars>,
}

impl DecoderVars {
    /// Predicts the normalized anchor state (and reward) from a normalized
    /// previous state/action and a latent node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        s_prev: VarId,
        a_prev: Option<VarId>,
        latent: VarId,
    ) -> Result<(VarId, Option<VarId>)> {
        if a_prev.is_some() != self.takes_actions {
            return Err(CoreError::shape(
                "decoder action input does not match the modality",
            ));
        }
        let mut parts = vec![s_prev];
        if let Some(a) = a_prev {
            parts.push(a);
        }
        parts.push(latent);
        let input = tape.concat(&parts)?;
        let s_pred = self.state.forward(tape, input)?;
        let r_pred = match &self.reward {
            Some(head) => Some(head.forward(tape, input)?),
            None => None,
        };
        Ok((s_pred, r_pred))
    }
}

// ── the bundle ───────────────────────────────────────────────────────────────

/// Everything Stage 1 trains, plus the frozen normalization statistics.
#[derive(Debug, Clone)]
pub struct Stage1Nets {
    pub latent_dim: usize,
    pub history_len: usize,
    pub include_future: bool,
    pub prior_input: PriorInput,
    pub norm: Normalizer,
    pub post: PosteriorNet,
    pub prior: PriorNet,
    pub dec: DecoderNet,
}

pub(crate) struct Stage1Vars {
    pub post: PosteriorVars,
    pub prior: PriorVars,
    pub dec: DecoderVars,
}

impl Stage1Nets {
    pub fn init(
        rng: &mut Rng,
        layout: FrameLayout,
        latent_dim: usize,
        history_len: usize,
        include_future: bool,
        prior_input: PriorInput,
    ) -> Stage1Nets {
        Stage1Nets {
            latent_dim,
            history_len,
            include_future,
            prior_input,
            norm: Normalizer::identity(layout),
            post: PosteriorNet::init(rng, layout, latent_dim),
            prior: PriorNet::init(rng, latent_dim),
            dec: DecoderNet::init(rng, layout, latent_dim),
        }
    }

    pub fn layout(&self) -> FrameLayout {
        self.norm.layout
    }

    pub(crate) fn bind_all(
        &self,
        tape: &mut Tape,
        ix: &mut BindIndex,
        freeze_post: bool,
        freeze_prior: bool,
        freeze_dec: bool,
    ) -> Result<Stage1Vars> {
        Ok(Stage1Vars {
            post: self.post.bind(tape, ix, "psi", freeze_post)?,
            prior: self.prior.bind(tape, ix, "phi", freeze_prior)?,
            dec: self.dec.bind(tape, ix, "dec", freeze_dec)?,
        })
    }

    /// Writes all parameters, normalization statistics, and identifying
    /// metadata; `extra_meta` entries are appended verbatim.
    pub fn save(&self, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
        let mut params = collect_params(self, "");
        for (name, t) in self.norm.to_tensors() {
            params.insert(name, t);
        }
        let layout = self.layout();
        let mut meta = vec![
            ("stage".to_string(), "1".to_string()),
            ("d_s".to_string(), layout.d_s.to_string()),
            ("d_a".to_string(), layout.d_a.to_string()),
            ("modality".to_string(), layout.modality.as_str().to_string()),
            ("latent_dim".to_string(), self.latent_dim.to_string()),
            ("history_len".to_string(), self.history_len.to_string()),
            (
                "include_future".to_string(),
                if self.include_future { "1" } else { "0" }.to_string(),
            ),
            (
                "prior_input".to_string(),
                self.prior_input.as_str().to_string(),
            ),
        ];
        meta.extend_from_slice(extra_meta);
        save_checkpoint(path, &params, &meta)
    }

    /// Reads a checkpoint written by [`Stage1Nets::save`]; returns the nets
    /// and any metadata beyond the identifying fields.
    pub fn load(path: &Path) -> Result<(Stage1Nets, Vec<(String, String)>)> {
        let (mut params, meta) = load_checkpoint(path)?;
        let stage = meta
            .iter()
            .find(|(k, _)| k == "stage")
            .map(|(_, v)| v.as_str());
        if stage != Some("1") {
            return Err(CoreError::format("not a stage-1 checkpoint"));
        }
        let nets = stage1_from_parts(&meta, &mut params)?;
        if let Some(name) = params.keys().next() {
            return Err(CoreError::format(format!(
                "checkpoint holds unexpected tensor {name:?}"
            )));
        }
        let known = [
            "stage",
            "d_s",
            "d_a",
            "modality",
            "latent_dim",
            "history_len",
            "include_future",
            "prior_input",
        ];
        let extras = meta
            .iter()
            .filter(|(k, _)| !known.contains(&k.as_str()))
            .cloned()
            .collect();
        Ok((nets, extras))
    }
}

/// Rebuilds nets from checkpoint pieces: reads the identifying meta keys and
/// removes the consumed tensors (`norm.*`, `psi.*`, `phi.*`, `dec.*`) from
/// `params`, leaving any others in place.
pub(crate) fn stage1_from_parts(
    meta: &[(String, String)],
    params: &mut BTreeMap<String, Tensor>,
) -> Result<Stage1Nets> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    for (k, v) in meta {
        fields.insert(k, v);
    }
    let get = |key: &str| -> Result<String> {
        fields
            .get(key)
            .map(|v| v.to_string())
            .ok_or_else(|| CoreError::format(format!("checkpoint lacks meta key {key:?}")))
    };
    let parse_usize = |s: String, key: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| CoreError::format(format!("meta {key} is not an integer")))
    };
    let layout = FrameLayout::new(
        parse_usize(get("d_s")?, "d_s")?,
        parse_usize(get("d_a")?, "d_a")?,
        Modality::parse(&get("modality")?)?,
    );
    let latent_dim = parse_usize(get("latent_dim")?, "latent_dim")?;
    let history_len = parse_usize(get("history_len")?, "history_len")?;
    let include_future = get("include_future")? == "1";
    let prior_input = PriorInput::parse(&get("prior_input")?)?;

    let mean = params
        .remove("norm.mean")
        .ok_or_else(|| CoreError::format("checkpoint lacks norm.mean"))?;
    let std = params
        .remove("norm.std")
        .ok_or_else(|| CoreError::format("checkpoint lacks norm.std"))?;

    let mut nets = Stage1Nets::init(
        &mut Rng::seed(0),
        layout,
        latent_dim,
        history_len,
        include_future,
        prior_input,
    );
    nets.norm = Normalizer::from_tensors(layout, &mean, &std)?;
    assign_params(&mut nets, "", params)?;
    Ok(nets)
}

impl ParamVisit for Stage1Nets {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.post.visit(&scoped(prefix, "psi"), f);
        self.prior.visit(&scoped(prefix, "phi"), f);
        self.dec.visit(&scoped(prefix, "dec"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.post.visit_mut(&scoped(prefix, "psi"), f);
        self.prior.visit_mut(&scoped(prefix, "phi"), f);
        self.dec.visit_mut(&scoped(prefix, "dec"), f);
    }
}

// ── inference entry points ───────────────────────────────────────────────────

/// Belief over the latent at a window's anchor, from raw (unnormalized)
/// frames in oldest-first order.
pub fn posterior_infer_frames(nets: &Stage1Nets, frames: &[Vec<f64>]) -> Result<LatentBelief> {
    let scaled: Vec<Vec<f64>> =
        frames.iter().map(|f| nets.norm.normalize(f)).collect::<Result<_>>()?;
    posterior_infer_scaled(nets, &scaled)
}

/// Same inference for frames that are already in normalized units (the
/// sampler's working representation).
pub fn posterior_infer_scaled(nets: &Stage1Nets, frames: &[Vec<f64>]) -> Result<LatentBelief> {
    let mut tape = Tape::new();
    let mut ix = BindIndex::new();
    let vars = nets.post.bind(&mut tape, &mut ix, "psi", false)?;
    let mut nodes = Vec::with_capacity(frames.len());
    for frame in frames {
        nodes.push(tape.constant_vec(frame.clone())?);
    }
    let belief = vars.forward(&mut tape, &nodes)?;
    belief.to_belief(&tape)
}

/// Belief at a [`BlockWindow`]'s anchor.
pub fn posterior_infer(nets: &Stage1Nets, window: &BlockWindow) -> Result<LatentBelief> {
    posterior_infer_frames(nets, &window.frames)
}

/// Belief over the next latent given the previous one (all-zeros at an
/// episode start).
pub fn prior_predict(nets: &Stage1Nets, c_prev: &[f64]) -> Result<LatentBelief> {
    if c_prev.len() != nets.latent_dim {
        return Err(CoreError::shape(format!(
            "prior input has {} dims, latent dim is {}",
            c_prev.len(),
            nets.latent_dim
        )));
    }
    let mut tape = Tape::new();
    let mut ix = BindIndex::new();
    let vars = nets.prior.bind(&mut tape, &mut ix, "phi", false)?;
    let input = tape.constant_vec(c_prev.to_vec())?;
    let belief = vars.forward(&mut tape, input)?;
    belief.to_belief(&tape)
}

/// Predicts the next state (and reward, when that head exists) from the raw
/// previous state/action and a latent context; outputs are in raw units.
pub fn decode_recon(
    nets: &Stage1Nets,
    s_prev: &[f64],
    a_prev: Option<&[f64]>,
    latent: &[f64],
) -> Result<(Vec<f64>, Option<f64>)> {
    if latent.len() != nets.latent_dim {
        return Err(CoreError::shape("latent has wrong dim for the decoder"));
    }
    let mut tape = Tape::new();
    let mut ix = BindIndex::new();
    let vars = nets.dec.bind(&mut tape, &mut ix, "dec", false)?;
    let s_node = tape.constant_vec(nets.norm.normalize_state(s_prev)?)?;
    let a_node = match a_prev {
        Some(a) => Some(tape.constant_vec(nets.norm.normalize_action(a)?)?),
        None => None,
    };
    let z = tape.constant_vec(latent.to_vec())?;
    let (s_pred, r_pred) = vars.forward(&mut tape, s_node, a_node, z)?;
    let s_raw = nets.norm.denormalize_state(tape.value(s_pred)?)?;
    let r_raw = match r_pred {
        Some(r) => Some(nets.norm.denormalize_reward(tape.value_scalar(r)?)),
        None => None,
    };
    Ok((s_raw, r_raw))
}
