//! Neural-net building blocks on top of the tape: dense layers, ReLU MLPs, and
//! a GRU cell, each split into a parameter struct (owning [`Tensor`]s) and a
//! bound-variable struct (holding [`VarId`]s on some tape).
//!
//! Binding registers every parameter as a leaf and records (name, id) pairs in
//! a [`BindIndex`] so gradients can be gathered by name afterwards. A frozen
//! binding routes each parameter through a stop-gradient barrier: values flow
//! forward, but the backward sweep leaves the parameters untouched.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Gradients, Tape, VarId};
use crate::numerics::tensor::Tensor;

/// Uniform init in ±sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut Rng, fan_in: usize, fan_out: usize, dims: Vec<usize>) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.range(-limit, limit)).collect();
    Tensor::from_vec(dims, data).expect("xavier init is finite by construction")
}

/// Uniform traversal over named parameters; the backbone for optimizers and
/// checkpoints.
pub trait ParamVisit {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Collects all parameters reachable from `net` into a name -> tensor map.
pub fn collect_params(net: &dyn ParamVisit, prefix: &str) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    net.visit(prefix, &mut |name, t| {
        out.insert(name.to_string(), t.clone());
    });
    out
}

/// Joins a visit prefix and a child name with a dot, leaving the name bare
/// when the prefix is empty.
pub fn scoped(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Overwrites every parameter reachable from `net` with the same-named entry
/// of `params`, removing entries as they are consumed. A missing name is a
/// format error, a shape mismatch a shape error; entries left in `params`
/// afterwards are the caller's to account for.
pub fn assign_params(
    net: &mut dyn ParamVisit,
    prefix: &str,
    params: &mut BTreeMap<String, Tensor>,
) -> Result<()> {
    let mut failure: Option<CoreError> = None;
    net.visit_mut(prefix, &mut |name, t| {
        if failure.is_some() {
            return;
        }
        match params.remove(name) {
            None => failure = Some(CoreError::format(format!("checkpoint lacks tensor {name:?}"))),
            Some(new) if new.dims() != t.dims() => {
                failure = Some(CoreError::shape(format!(
                    "checkpoint tensor {name:?} has dims {:?}, net expects {:?}",
                    new.dims(),
                    t.dims()
                )));
            }
            Some(new) => *t = new,
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Name/id pairs recorded while binding parameters to a tape.
#[derive(Debug, Default)]
pub struct BindIndex {
    entries: Vec<(String, VarId, usize)>,
}

impl BindIndex {
    pub fn new() -> BindIndex {
        BindIndex::default()
    }

    pub fn record(&mut self, name: String, id: VarId, len: usize) {
        self.entries.push((name, id, len));
    }

    /// Gathers gradients for every recorded parameter, zero-filled for
    /// parameters the root does not depend on.
    pub fn gather(&self, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, id, len) in &self.entries {
            out.insert(name.clone(), grads.wrt_or_zeros(*id, *len));
        }
        out
    }
}

/// Running sum of named gradient maps, closed out as a batch mean.
#[derive(Debug, Default)]
pub struct GradAccum {
    sums: BTreeMap<String, Vec<f64>>,
    count: usize,
}

impl GradAccum {
    pub fn new() -> GradAccum {
        GradAccum::default()
    }

    pub fn add(&mut self, grads: &BTreeMap<String, Vec<f64>>) {
        for (name, g) in grads {
            let slot = self.sums.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (s, v) in slot.iter_mut().zip(g) {
                *s += v;
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean over the added maps; empty when nothing was added.
    pub fn mean(mut self) -> BTreeMap<String, Vec<f64>> {
        let n = self.count.max(1) as f64;
        for g in self.sums.values_mut() {
            for v in g.iter_mut() {
                *v /= n;
            }
        }
        self.sums
    }
}

fn bind_tensor(
    tape: &mut Tape,
    ix: &mut BindIndex,
    name: String,
    t: &Tensor,
    freeze: bool,
) -> Result<VarId> {
    let leaf = tape.leaf(t);
    ix.record(name, leaf, t.len());
    if freeze {
        tape.stop_gradient(leaf)
    } else {
        Ok(leaf)
    }
}

// ── dense layer ──────────────────────────────────────────────────────────────

/// Affine layer `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn init(rng: &mut Rng, in_dim: usize, out_dim: usize) -> Dense {
        Dense {
            w: xavier_uniform(rng, in_dim, out_dim, vec![out_dim, in_dim]),
            b: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[0]
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        ix: &mut BindIndex,
        prefix: &str,
        freeze: bool,
    ) -> Result<DenseVars> {
        Ok(DenseVars {
            w: bind_tensor(tape, ix, format!("{prefix}.w"), &self.w, freeze)?,
            b: bind_tensor(tape, ix, format!("{prefix}.b"), &self.b, freeze)?,
        })
    }
}

impl ParamVisit for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

/// Tape-bound dense layer.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub w: VarId,
    pub b: VarId,
}

impl DenseVars {
    pub fn forward(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let wx = tape.matmul(self.w, x)?;
        tape.add(wx, self.b)
    }
}

// ── multi-layer perceptron ───────────────────────────────────────────────────

/// Stack of dense layers with ReLU between hidden layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims` lists the layer widths input-first, e.g. `[8, 64, 64, 4]`.
    pub fn init(rng: &mut Rng, dims: &[usize]) -> Mlp {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = dims
            .windows(2)
            .map(|w| Dense::init(rng, w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        ix: &mut BindIndex,
        prefix: &str,
        freeze: bool,
    ) -> Result<MlpVars> {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.bind(tape, ix, &format!("{prefix}.{i}"), freeze))
            .collect::<Result<Vec<_>>>()?;
        Ok(MlpVars { layers })
    }
}

impl ParamVisit for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

/// Tape-bound MLP.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<DenseVars>,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h)?;
            if i != last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

// ── GRU cell ─────────────────────────────────────────────────────────────────

/// Gated recurrent unit with the convention
/// `h' = (1 - z) * h + z * tanh(Wh x + Uh (r * h) + bh)`.
///
/// With all-zero parameters both gates sit at 1/2 and the candidate at 0, so a
/// hidden state decays by half each step — a fixed point used in tests.
#[derive(Debug, Clone)]
pub struct Gru {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
    pub bh: Tensor,
}

impl Gru {
    pub fn init(rng: &mut Rng, in_dim: usize, hidden: usize) -> Gru {
        let w = |rng: &mut Rng| xavier_uniform(rng, in_dim, hidden, vec![hidden, in_dim]);
        let u = |rng: &mut Rng| xavier_uniform(rng, hidden, hidden, vec![hidden, hidden]);
        Gru {
            wz: w(rng),
            uz: u(rng),
            bz: Tensor::zeros(vec![hidden]),
            wr: w(rng),
            ur: u(rng),
            br: Tensor::zeros(vec![hidden]),
            wh: w(rng),
            uh: u(rng),
            bh: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.bz.len()
    }

    pub fn bind(
        &self,
        tape: &mut Tape,
        ix: &mut BindIndex,
        prefix: &str,
        freeze: bool,
    ) -> Result<GruVars> {
        Ok(GruVars {
            wz: bind_tensor(tape, ix, format!("{prefix}.wz"), &self.wz, freeze)?,
            uz: bind_tensor(tape, ix, format!("{prefix}.uz"), &self.uz, freeze)?,
            bz: bind_tensor(tape, ix, format!("{prefix}.bz"), &self.bz, freeze)?,
            wr: bind_tensor(tape, ix, format!("{prefix}.wr"), &self.wr, freeze)?,
            ur: bind_tensor(tape, ix, format!("{prefix}.ur"), &self.ur, freeze)?,
            br: bind_tensor(tape, ix, format!("{prefix}.br"), &self.br, freeze)?,
            wh: bind_tensor(tape, ix, format!("{prefix}.wh"), &self.wh, freeze)?,
            uh: bind_tensor(tape, ix, format!("{prefix}.uh"), &self.uh, freeze)?,
            bh: bind_tensor(tape, ix, format!("{prefix}.bh"), &self.bh, freeze)?,
        })
    }
}

impl ParamVisit for Gru {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.wz"), &self.wz);
        f(&format!("{prefix}.uz"), &self.uz);
        f(&format!("{prefix}.bz"), &self.bz);
        f(&format!("{prefix}.wr"), &self.wr);
        f(&format!("{prefix}.ur"), &self.ur);
        f(&format!("{prefix}.br"), &self.br);
        f(&format!("{prefix}.wh"), &self.wh);
        f(&format!("{prefix}.uh"), &self.uh);
        f(&format!("{prefix}.bh"), &self.bh);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.wz"), &mut self.wz);
        f(&format!("{prefix}.uz"), &mut self.uz);
        f(&format!("{prefix}.bz"), &mut self.bz);
        f(&format!("{prefix}.wr"), &mut self.wr);
        f(&format!("{prefix}.ur"), &mut self.ur);
        f(&format!("{prefix}.br"), &mut self.br);
        f(&format!("{prefix}.wh"), &mut self.wh);
        f(&format!("{prefix}.uh"), &mut self.uh);
        f(&format!("{prefix}.bh"), &mut self.bh);
    }
}

/// Tape-bound GRU cell.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: VarId,
    pub uz: VarId,
    pub bz: VarId,
    pub wr: VarId,
    pub ur: VarId,
    pub br: VarId,
    pub wh: VarId,
    pub uh: VarId,
    pub bh: VarId,
}

impl GruVars {
    /// One recurrence step.
    pub fn step(&self, tape: &mut Tape, x: VarId, h_prev: VarId) -> Result<VarId> {
        let hidden = tape.value(h_prev)?.len();
        let ones = tape.constant_vec(vec![1.0; hidden])?;

        let wzx = tape.matmul(self.wz, x)?;
        let uzh = tape.matmul(self.uz, h_prev)?;
        let z_pre = tape.add(wzx, uzh)?;
        let z_pre = tape.add(z_pre, self.bz)?;
        let z = tape.sigmoid(z_pre)?;

        let wrx = tape.matmul(self.wr, x)?;
        let urh = tape.matmul(self.ur, h_prev)?;
        let r_pre = tape.add(wrx, urh)?;
        let r_pre = tape.add(r_pre, self.br)?;
        let r = tape.sigmoid(r_pre)?;

        let rh = tape.mul(r, h_prev)?;
        let whx = tape.matmul(self.wh, x)?;
        let uhrh = tape.matmul(self.uh, rh)?;
        let cand_pre = tape.add(whx, uhrh)?;
        let cand_pre = tape.add(cand_pre, self.bh)?;
        let cand = tape.tanh(cand_pre)?;

        let keep = tape.sub(ones, z)?;
        let kept = tape.mul(keep, h_prev)?;
        let new = tape.mul(z, cand)?;
        tape.add(kept, new)
    }

    /// Runs the cell over `xs`, returning the hidden state after each input;
    /// an empty sequence yields an empty output.
    pub fn forward_seq(&self, tape: &mut Tape, xs: &[VarId], h0: VarId) -> Result<Vec<VarId>> {
        let mut hs = Vec::with_capacity(xs.len());
        let mut h = h0;
        for &x in xs {
            h = self.step(tape, x, h)?;
            hs.push(h);
        }
        Ok(hs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_respects_limit() {
        let mut rng = Rng::seed(0);
        let t = xavier_uniform(&mut rng, 10, 14, vec![14, 10]);
        let limit = (6.0 / 24.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= limit));
        // A degenerate all-zero draw would mean the RNG is broken.
        assert!(t.data().iter().any(|v| v.abs() > limit / 100.0));
    }

    #[test]
    fn zero_gru_halves_hidden_state() {
        let mut tape = Tape::new();
        let mut ix = BindIndex::new();
        let gru = Gru {
            wz: Tensor::zeros(vec![2, 1]),
            uz: Tensor::zeros(vec![2, 2]),
            bz: Tensor::zeros(vec![2]),
            wr: Tensor::zeros(vec![2, 1]),
            ur: Tensor::zeros(vec![2, 2]),
            br: Tensor::zeros(vec![2]),
            wh: Tensor::zeros(vec![2, 1]),
            uh: Tensor::zeros(vec![2, 2]),
            bh: Tensor::zeros(vec![2]),
        };
        let vars = gru.bind(&mut tape, &mut ix, "g", false).unwrap();
        let h0 = tape
            .constant(&Tensor::vector(vec![1.0, 1.0]).unwrap());
        let x = tape.constant(&Tensor::vector(vec![0.3]).unwrap());
        let hs = vars.forward_seq(&mut tape, &[x, x], h0).unwrap();
        assert_eq!(tape.value(hs[0]).unwrap(), &[0.5, 0.5]);
        assert_eq!(tape.value(hs[1]).unwrap(), &[0.25, 0.25]);
    }

    #[test]
    fn empty_sequence_gives_empty_output() {
        let mut tape = Tape::new();
        let mut ix = BindIndex::new();
        let mut rng = Rng::seed(1);
        let gru = Gru::init(&mut rng, 3, 4);
        let vars = gru.bind(&mut tape, &mut ix, "g", false).unwrap();
        let h0 = tape.constant(&Tensor::zeros(vec![4]));
        let hs = vars.forward_seq(&mut tape, &[], h0).unwrap();
        assert!(hs.is_empty());
    }

    #[test]
    fn frozen_binding_yields_no_gradient() {
        let mut tape = Tape::new();
        let mut ix = BindIndex::new();
        let mut rng = Rng::seed(2);
        let layer = Dense::init(&mut rng, 2, 2);
        let vars = layer.bind(&mut tape, &mut ix, "d", true).unwrap();
        let x = tape.constant(&Tensor::vector(vec![1.0, -1.0]).unwrap());
        let y = vars.forward(&mut tape, x).unwrap();
        let root = tape.sum(y).unwrap();
        let grads = tape.backward(root).unwrap();
        let by_name = ix.gather(&grads);
        assert!(by_name["d.w"].iter().all(|&g| g == 0.0));
        assert!(by_name["d.b"].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mlp_dims_chain() {
        let mut rng = Rng::seed(3);
        let mlp = Mlp::init(&mut rng, &[5, 16, 3]);
        assert_eq!(mlp.in_dim(), 5);
        assert_eq!(mlp.out_dim(), 3);
        let mut tape = Tape::new();
        let mut ix = BindIndex::new();
        let vars = mlp.bind(&mut tape, &mut ix, "m", false).unwrap();
        let x = tape.constant(&Tensor::vector(vec![0.1; 5]).unwrap());
        let y = vars.forward(&mut tape, x).unwrap();
        assert_eq!(tape.dims(y).unwrap(), &[3]);
    }

    #[test]
    fn visit_names_are_stable_and_complete() {
        let mut rng = Rng::seed(4);
        let mlp = Mlp::init(&mut rng, &[2, 4, 1]);
        let params = collect_params(&mlp, "net");
        let names: Vec<&str> = params.keys().map(|s| s.as_str()).collect();
        assert_eq!(names, vec!["net.0.b", "net.0.w", "net.1.b", "net.1.w"]);
    }
}
