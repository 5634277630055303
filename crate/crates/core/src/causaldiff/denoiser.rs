//! The block denoiser: an MLP over a whole plan block, conditioned per frame
//! on a sinusoidal level embedding and a latent-context vector, plus a GRU
//! summary of the recent observed frames and a two-slot goal vector.
//!
//! The network predicts the clean block directly (`x^0`-parameterization); the
//! sampler turns those predictions into level moves via
//! [`level_jump`](super::schedule::level_jump).

use crate::error::{CoreError, Result};
use crate::numerics::{
    scoped, BindIndex, Gru, GruVars, Mlp, MlpVars, ParamVisit, Rng, Tape, Tensor, VarId,
};

/// Width of the sinusoidal level embedding (sin/cos pairs at four scales).
pub const LEVEL_EMBED_DIM: usize = 8;
/// Width of the goal vector: a normalized return target and a live-flag.
pub const CONDITION_DIM: usize = 2;
/// Hidden width of the history GRU.
pub const HISTORY_HIDDEN: usize = 64;
/// Hidden width of the trunk MLP.
const TRUNK_WIDTH: usize = 128;

/// What the generated frames contain, which follows the planning mode: whole
/// state-action pairs, states only, or actions only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenTarget {
    Joint,
    States,
    Actions,
}

impl GenTarget {
    pub fn frame_dim(&self, d_s: usize, d_a: usize) -> usize {
        match self {
            GenTarget::Joint => d_s + d_a,
            GenTarget::States => d_s,
            GenTarget::Actions => d_a,
        }
    }

    /// Assembles one generation frame from a step's state and action.
    pub fn frame_of(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match self {
            GenTarget::Joint => s.iter().chain(a).copied().collect(),
            GenTarget::States => s.to_vec(),
            GenTarget::Actions => a.to_vec(),
        }
    }

    /// Splits a generation frame back into its state and action parts.
    pub fn split_frame<'a>(
        &self,
        frame: &'a [f64],
        d_s: usize,
    ) -> (Option<&'a [f64]>, Option<&'a [f64]>) {
        match self {
            GenTarget::Joint => (Some(&frame[..d_s]), Some(&frame[d_s..])),
            GenTarget::States => (Some(frame), None),
            GenTarget::Actions => (None, Some(frame)),
        }
    }
}

/// Sinusoidal features of a noise level: sin/cos of `k / 10^j` for j in 0..4,
/// so neighbouring levels stay distinguishable while far scales vary slowly.
pub fn level_embedding(k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(LEVEL_EMBED_DIM);
    let mut denom = 1.0;
    for _ in 0..LEVEL_EMBED_DIM / 2 {
        let angle = k as f64 / denom;
        out.push(angle.sin());
        out.push(angle.cos());
        denom *= 10.0;
    }
    out
}

/// Parameters of the block denoiser.
#[derive(Debug, Clone)]
pub struct DenoiserNet {
    pub frame_dim: usize,
    pub latent_dim: usize,
    pub block_len: usize,
    pub hist_in_dim: usize,
    pub hist: Gru,
    pub trunk: Mlp,
}

impl DenoiserNet {
    pub fn init(
        rng: &mut Rng,
        frame_dim: usize,
        latent_dim: usize,
        block_len: usize,
        hist_in_dim: usize,
    ) -> DenoiserNet {
        let per_frame = frame_dim + LEVEL_EMBED_DIM + latent_dim;
        let in_dim = block_len * per_frame + HISTORY_HIDDEN + CONDITION_DIM;
        DenoiserNet {
            frame_dim,
            latent_dim,
            block_len,
            hist_in_dim,
            hist: Gru::init(rng, hist_in_dim, HISTORY_HIDDEN),
            trunk: Mlp::init(rng, &[in_dim, TRUNK_WIDTH, TRUNK_WIDTH, block_len * frame_dim]),
        }
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        ix: &mut BindIndex,
        prefix: &str,
        freeze: bool,
    ) -> Result<DenoiserVars> {
        Ok(DenoiserVars {
            frame_dim: self.frame_dim,
            block_len: self.block_len,
            hist: self.hist.bind(tape, ix, &scoped(prefix, "hist"), freeze)?,
            trunk: self.trunk.bind(tape, ix, &scoped(prefix, "trunk"), freeze)?,
        })
    }
}

impl ParamVisit for DenoiserNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hist.visit(&scoped(prefix, "hist"), f);
        self.trunk.visit(&scoped(prefix, "trunk"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hist.visit_mut(&scoped(prefix, "hist"), f);
        self.trunk.visit_mut(&scoped(prefix, "trunk"), f);
    }
}

/// Tape-bound denoiser.
pub struct DenoiserVars {
    frame_dim: usize,
    block_len: usize,
    hist: GruVars,
    trunk: MlpVars,
}

impl DenoiserVars {
    /// Runs the history GRU over observed frames and returns the final hidden
    /// state (zeros when there is no history yet).
    pub fn summarize_history(&self, tape: &mut Tape, frames: &[VarId]) -> Result<VarId> {
        let mut h = tape.constant_vec(vec![0.0; HISTORY_HIDDEN])?;
        for &x in frames {
            h = self.hist.step(tape, x, h)?;
        }
        Ok(h)
    }

    /// Predicts the clean block from noisy frames at the given levels. Returns
    /// one node per frame.
    pub fn predict(
        &self,
        tape: &mut Tape,
        frames: &[VarId],
        levels: &[usize],
        latents: &[VarId],
        summary: VarId,
        y: VarId,
    ) -> Result<Vec<VarId>> {
        if frames.len() != self.block_len
            || levels.len() != self.block_len
            || latents.len() != self.block_len
        {
            return Err(CoreError::shape(format!(
                "denoiser expects {} frames/levels/latents, got {}/{}/{}",
                self.block_len,
                frames.len(),
                levels.len(),
                latents.len()
            )));
        }
        let mut parts = Vec::with_capacity(self.block_len + 2);
        for i in 0..self.block_len {
            let emb = tape.constant_vec(level_embedding(levels[i]))?;
            parts.push(tape.concat(&[frames[i], emb, latents[i]])?);
        }
        parts.push(summary);
        parts.push(y);
        let flat = tape.concat(&parts)?;
        let out = self.trunk.forward(tape, flat)?;
        (0..self.block_len)
            .map(|i| tape.slice(out, i * self.frame_dim, self.frame_dim))
            .collect()
    }
}

/// A block mid-denoising: working frames in normalized units, their current
/// levels, the per-frame latents, the observed history frames, and the goal
/// vector.
#[derive(Debug, Clone)]
pub struct NoisyBlock {
    pub frames: Vec<Vec<f64>>,
    pub levels: Vec<usize>,
    pub latents: Vec<Vec<f64>>,
    pub history: Vec<Vec<f64>>,
    pub y: [f64; 2],
}

impl NoisyBlock {
    pub fn validate(&self, net: &DenoiserNet) -> Result<()> {
        if self.frames.len() != net.block_len
            || self.levels.len() != net.block_len
            || self.latents.len() != net.block_len
        {
            return Err(CoreError::shape(format!(
                "block has {} frames, {} levels, {} latents; net expects {}",
                self.frames.len(),
                self.levels.len(),
                self.latents.len(),
                net.block_len
            )));
        }
        for f in &self.frames {
            if f.len() != net.frame_dim {
                return Err(CoreError::shape(format!(
                    "frame has {} dims, net expects {}",
                    f.len(),
                    net.frame_dim
                )));
            }
        }
        for c in &self.latents {
            if c.len() != net.latent_dim {
                return Err(CoreError::shape(format!(
                    "latent has {} dims, net expects {}",
                    c.len(),
                    net.latent_dim
                )));
            }
        }
        for h in &self.history {
            if h.len() != net.hist_in_dim {
                return Err(CoreError::shape(format!(
                    "history frame has {} dims, net expects {}",
                    h.len(),
                    net.hist_in_dim
                )));
            }
        }
        Ok(())
    }
}

/// Value-mode clean-block prediction for a [`NoisyBlock`].
pub fn denoise_predict(net: &DenoiserNet, block: &NoisyBlock) -> Result<Vec<Vec<f64>>> {
    block.validate(net)?;
    let mut tape = Tape::new();
    let mut ix = BindIndex::new();
    let vars = net.bind(&mut tape, &mut ix, "theta", true)?;
    let hist_nodes = block
        .history
        .iter()
        .map(|h| tape.constant_vec(h.clone()))
        .collect::<Result<Vec<_>>>()?;
    let summary = vars.summarize_history(&mut tape, &hist_nodes)?;
    let summary_vals = tape.value(summary)?.to_vec();
    predict_with_summary(net, &vars, &mut tape, block, &summary_vals)
}

/// Prediction with a precomputed history summary, used by the samplers to run
/// the GRU once per plan instead of once per denoising step.
pub(crate) fn predict_with_summary(
    _net: &DenoiserNet,
    vars: &DenoiserVars,
    tape: &mut Tape,
    block: &NoisyBlock,
    summary_vals: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let frames = block
        .frames
        .iter()
        .map(|f| tape.constant_vec(f.clone()))
        .collect::<Result<Vec<_>>>()?;
    let latents = block
        .latents
        .iter()
        .map(|c| tape.constant_vec(c.clone()))
        .collect::<Result<Vec<_>>>()?;
    let summary = tape.constant_vec(summary_vals.to_vec())?;
    let y = tape.constant_vec(block.y.to_vec())?;
    let preds = vars.predict(tape, &frames, &block.levels, &latents, summary, y)?;
    preds.iter().map(|&p| Ok(tape.value(p)?.to_vec())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_net(seed: u64) -> DenoiserNet {
        DenoiserNet::init(&mut Rng::seed(seed), 3, 2, 4, 5)
    }

    fn tiny_block(rng: &mut Rng) -> NoisyBlock {
        NoisyBlock {
            frames: (0..4).map(|_| rng.normal_vec(3)).collect(),
            levels: vec![25, 50, 75, 100],
            latents: (0..4).map(|_| rng.normal_vec(2)).collect(),
            history: (0..6).map(|_| rng.normal_vec(5)).collect(),
            y: [0.3, 1.0],
        }
    }

    #[test]
    fn adjacent_levels_get_distinct_embeddings() {
        for k in 0..200 {
            let a = level_embedding(k);
            let b = level_embedding(k + 1);
            let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(dist > 0.5, "levels {k} and {} embed too close", k + 1);
        }
    }

    #[test]
    fn zeroed_net_emits_its_output_bias_per_frame() {
        let mut net = tiny_net(0);
        net.visit_mut("", &mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        // Stamp a recognizable pattern into the trunk's output bias.
        net.visit_mut("", &mut |name, t| {
            if name == "trunk.2.b" {
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v = i as f64 / 10.0;
                }
            }
        });
        let mut rng = Rng::seed(1);
        let block = tiny_block(&mut rng);
        let preds = denoise_predict(&net, &block).unwrap();
        for (i, p) in preds.iter().enumerate() {
            for (j, v) in p.iter().enumerate() {
                assert_eq!(*v, (i * 3 + j) as f64 / 10.0);
            }
        }
    }

    #[test]
    fn prediction_is_deterministic_in_its_inputs() {
        let net = tiny_net(2);
        let mut rng = Rng::seed(9);
        let block = tiny_block(&mut rng);
        let a = denoise_predict(&net, &block).unwrap();
        let b = denoise_predict(&net, &block).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn history_changes_the_prediction() {
        let net = tiny_net(3);
        let mut rng = Rng::seed(4);
        let block = tiny_block(&mut rng);
        let mut other = block.clone();
        other.history[0][0] += 1.0;
        let a = denoise_predict(&net, &block).unwrap();
        let b = denoise_predict(&net, &other).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_history_is_allowed() {
        let net = tiny_net(5);
        let mut rng = Rng::seed(6);
        let mut block = tiny_block(&mut rng);
        block.history.clear();
        assert!(denoise_predict(&net, &block).is_ok());
    }

    #[test]
    fn mismatched_blocks_are_rejected() {
        let net = tiny_net(7);
        let mut rng = Rng::seed(8);
        let good = tiny_block(&mut rng);

        let mut short = good.clone();
        short.frames.pop();
        short.levels.pop();
        short.latents.pop();
        assert!(matches!(denoise_predict(&net, &short), Err(CoreError::Shape(_))));

        let mut bad_frame = good.clone();
        bad_frame.frames[0].push(0.0);
        assert!(matches!(denoise_predict(&net, &bad_frame), Err(CoreError::Shape(_))));

        let mut bad_latent = good.clone();
        bad_latent.latents[2].pop();
        assert!(matches!(denoise_predict(&net, &bad_latent), Err(CoreError::Shape(_))));

        let mut bad_hist = good;
        bad_hist.history[1].pop();
        assert!(matches!(denoise_predict(&net, &bad_hist), Err(CoreError::Shape(_))));
    }

    #[test]
    fn frame_targets_assemble_and_split() {
        let s = [1.0, 2.0];
        let a = [3.0];
        assert_eq!(GenTarget::Joint.frame_of(&s, &a), vec![1.0, 2.0, 3.0]);
        assert_eq!(GenTarget::States.frame_of(&s, &a), vec![1.0, 2.0]);
        assert_eq!(GenTarget::Actions.frame_of(&s, &a), vec![3.0]);
        let joint = [1.0, 2.0, 3.0];
        let (js, ja) = GenTarget::Joint.split_frame(&joint, 2);
        assert_eq!(js.unwrap(), &s);
        assert_eq!(ja.unwrap(), &a);
        assert_eq!(GenTarget::Joint.frame_dim(2, 1), 3);
        assert_eq!(GenTarget::States.frame_dim(2, 1), 2);
        assert_eq!(GenTarget::Actions.frame_dim(2, 1), 1);
    }
}
