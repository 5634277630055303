//! Reverse-mode automatic differentiation on a write-once tape.
//!
//! Ops evaluate eagerly as they are recorded, every result is checked for
//! finiteness, and [`Tape::backward`] replays the tape in reverse from a scalar
//! root, accumulating vector-Jacobian products into a per-node gradient map.
//! A tape lives for exactly one training step; nothing is ever freed early.

use crate::error::{CoreError, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    StopGrad,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Neg(VarId),
    Scale(VarId, f64),
    AddConst(VarId),
    MatMul(VarId, VarId),
    Tanh(VarId),
    Sigmoid(VarId),
    Relu(VarId),
    Exp(VarId),
    Log(VarId),
    Softplus(VarId),
    Square(VarId),
    Clamp(VarId, f64, f64),
    Sum(VarId),
    Mean(VarId),
    Concat(Vec<VarId>),
    Slice(VarId, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    dims: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Write-once computation tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`]; nodes not on a path to
/// the root have no entry and read as zero.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, or `None` if `id` does not
    /// influence the root.
    pub fn wrt(&self, id: VarId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Dense gradient with zeros filled in for unreached nodes.
    pub fn wrt_or_zeros(&self, id: VarId, len: usize) -> Vec<f64> {
        match self.wrt(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

fn numeric_guard(kind: &str, vals: &[f64], domain: bool) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let msg = format!("{kind} produced a non-finite value");
    if domain {
        Err(CoreError::domain(msg))
    } else {
        Err(CoreError::numeric(msg))
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

fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)) avoids overflow on either tail.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<f64>, op: Op) -> VarId {
        self.nodes.push(Node { dims, value, op });
        VarId(self.nodes.len() - 1)
    }

    fn node(&self, id: VarId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| CoreError::contract(format!("invalid tape id {}", id.0)))
    }

    /// Shape of a node.
    pub fn dims(&self, id: VarId) -> Result<&[usize]> {
        Ok(&self.node(id)?.dims)
    }

    /// Forward value of a node.
    pub fn value(&self, id: VarId) -> Result<&[f64]> {
        Ok(&self.node(id)?.value)
    }

    /// Forward value of a single-element node.
    pub fn value_scalar(&self, id: VarId) -> Result<f64> {
        let v = self.value(id)?;
        if v.len() != 1 {
            return Err(CoreError::contract(format!(
                "expected scalar node, got {} elements",
                v.len()
            )));
        }
        Ok(v[0])
    }

    /// Registers a differentiable leaf holding `t`.
    pub fn leaf(&mut self, t: &Tensor) -> VarId {
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    /// Registers a constant (non-differentiated) leaf holding `t`.
    ///
    /// Constants are leaves that callers simply never collect gradients for;
    /// the distinction lives at the call site, which keeps the tape itself
    /// free of bookkeeping.
    pub fn constant(&mut self, t: &Tensor) -> VarId {
        self.leaf(t)
    }

    /// Constant rank-1 leaf from a plain vector.
    pub fn constant_vec(&mut self, data: Vec<f64>) -> Result<VarId> {
        let t = Tensor::vector(data)?;
        Ok(self.constant(&t))
    }

    /// Constant single-element leaf.
    pub fn constant_scalar(&mut self, v: f64) -> Result<VarId> {
        self.constant_vec(vec![v])
    }

    /// Identity with a gradient barrier: the value flows, the gradient stops.
    pub fn stop_gradient(&mut self, a: VarId) -> Result<VarId> {
        let n = self.node(a)?;
        Ok(self.push(n.dims.clone(), n.value.clone(), Op::StopGrad))
    }

    fn binary_elementwise(
        &mut self,
        kind: &str,
        a: VarId,
        b: VarId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        domain: bool,
    ) -> Result<VarId> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.dims != nb.dims {
            return Err(CoreError::shape(format!(
                "{kind}: {:?} vs {:?}",
                na.dims, nb.dims
            )));
        }
        let value: Vec<f64> = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        numeric_guard(kind, &value, domain)?;
        let dims = na.dims.clone();
        Ok(self.push(dims, value, op))
    }

    fn unary_elementwise(
        &mut self,
        kind: &str,
        a: VarId,
        f: impl Fn(f64) -> f64,
        op: Op,
        domain: bool,
    ) -> Result<VarId> {
        let na = self.node(a)?;
        let value: Vec<f64> = na.value.iter().map(|&x| f(x)).collect();
        numeric_guard(kind, &value, domain)?;
        let dims = na.dims.clone();
        Ok(self.push(dims, value, op))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b), false)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b), false)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b), false)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b), true)
    }

    pub fn neg(&mut self, a: VarId) -> Result<VarId> {
        self.unary_elementwise("neg", a, |x| -x, Op::Neg(a), false)
    }

    /// Multiplication by a compile-time constant.
    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.unary_elementwise("scale", a, |x| c * x, Op::Scale(a, c), false)
    }

    /// Addition of a compile-time constant.
    pub fn add_const(&mut self, a: VarId, c: f64) -> Result<VarId> {
        self.unary_elementwise("add_const", a, |x| x + c, Op::AddConst(a), false)
    }

    /// Matrix product: `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (na, nb) = (self.node(a)?, self.node(b)?);
        if na.dims.len() != 2 {
            return Err(CoreError::shape(format!(
                "matmul: left operand must be rank 2, got {:?}",
                na.dims
            )));
        }
        let (m, k) = (na.dims[0], na.dims[1]);
        let (value, dims) = match nb.dims.len() {
            1 => {
                if nb.dims[0] != k {
                    return Err(CoreError::shape(format!(
                        "matmul: [{m},{k}] x [{}]",
                        nb.dims[0]
                    )));
                }
                let mut out = vec![0.0; m];
                for i in 0..m {
                    let row = &na.value[i * k..(i + 1) * k];
                    out[i] = row.iter().zip(&nb.value).map(|(&x, &y)| x * y).sum();
                }
                (out, vec![m])
            }
            2 => {
                let (k2, n) = (nb.dims[0], nb.dims[1]);
                if k2 != k {
                    return Err(CoreError::shape(format!(
                        "matmul: [{m},{k}] x [{k2},{n}]"
                    )));
                }
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for l in 0..k {
                        let x = na.value[i * k + l];
                        if x == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            out[i * n + j] += x * nb.value[l * n + j];
                        }
                    }
                }
                (out, vec![m, n])
            }
            r => {
                return Err(CoreError::shape(format!(
                    "matmul: right operand rank {r} unsupported"
                )))
            }
        };
        numeric_guard("matmul", &value, false)?;
        Ok(self.push(dims, value, Op::MatMul(a, b)))
    }

    pub fn tanh(&mut self, a: VarId) -> Result<VarId> {
        self.unary_elementwise("tanh", a, f64::tanh, Op::Tanh(a), false)
    }

    pub fn sigmoid(&mut self, a: VarId) -> Result<VarId> {
        self.unary_elementwise("sigmoid", a, sigmoid, Op::Sigmoid(a), false)
    }

    pub fn relu(&mut self, a: VarId) -> Result<VarId> {
        self.unary_elementwise("relu", a, |x| x.max(0.0), Op::Relu(a), false)
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId> {
        self.unary_elementwise("exp", a, f64::exp, Op::Exp(a), true)
    }

    /// Natural logarithm; any non-positive input is a domain violation.
    pub fn log(&mut self, a: VarId) -> Result<VarId> {
        let na = self.node(a)?;
        if na.value.iter().any(|&x| x <= 0.0) {
            return Err(CoreError::domain("log of a non-positive value"));
        }
        self.unary_elementwise("log", a, f64::ln, Op::Log(a), true)
    }

    pub fn softplus(&mut self, a: VarId) -> Result<VarId> {
        self.unary_elementwise("softplus", a, softplus, Op::Softplus(a), false)
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId> {
        self.unary_elementwise("square", a, |x| x * x, Op::Square(a), false)
    }

    /// Elementwise clamp to [lo, hi]; the gradient passes unchanged strictly
    /// inside the interval and is zero outside.
    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> Result<VarId> {
        if !(lo < hi) {
            return Err(CoreError::contract(format!("clamp bounds [{lo}, {hi}]")));
        }
        self.unary_elementwise("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi), false)
    }

    /// Sum of all elements; result is a single-element node.
    pub fn sum(&mut self, a: VarId) -> Result<VarId> {
        let na = self.node(a)?;
        let s: f64 = na.value.iter().sum();
        numeric_guard("sum", &[s], false)?;
        Ok(self.push(vec![1], vec![s], Op::Sum(a)))
    }

    /// Mean of all elements; result is a single-element node.
    pub fn mean(&mut self, a: VarId) -> Result<VarId> {
        let na = self.node(a)?;
        if na.value.is_empty() {
            return Err(CoreError::contract("mean of an empty node"));
        }
        let s: f64 = na.value.iter().sum::<f64>() / na.value.len() as f64;
        numeric_guard("mean", &[s], false)?;
        Ok(self.push(vec![1], vec![s], Op::Mean(a)))
    }

    /// Concatenation of rank-1 nodes.
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat of zero nodes"));
        }
        let mut value = Vec::new();
        for &p in parts {
            let n = self.node(p)?;
            if n.dims.len() > 1 {
                return Err(CoreError::shape(format!(
                    "concat expects rank-1 nodes, got {:?}",
                    n.dims
                )));
            }
            value.extend_from_slice(&n.value);
        }
        let dims = vec![value.len()];
        Ok(self.push(dims, value, Op::Concat(parts.to_vec())))
    }

    /// Contiguous slice `[start, start+len)` of a rank-1 node.
    pub fn slice(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId> {
        let na = self.node(a)?;
        if na.dims.len() > 1 {
            return Err(CoreError::shape(format!(
                "slice expects a rank-1 node, got {:?}",
                na.dims
            )));
        }
        if start + len > na.value.len() {
            return Err(CoreError::shape(format!(
                "slice [{start}, {}) out of bounds for length {}",
                start + len,
                na.value.len()
            )));
        }
        let value = na.value[start..start + len].to_vec();
        Ok(self.push(vec![len], value, Op::Slice(a, start, len)))
    }

    /// Reverse sweep from a single-element root; returns the gradient map.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if root_node.value.len() != 1 {
            return Err(CoreError::contract(format!(
                "backward root must be scalar, got {} elements",
                root_node.value.len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            // Reinstall so callers can read it afterwards; the take() above
            // sidesteps simultaneous mutable borrows during accumulation.
            let node = &self.nodes[id];
            self.accumulate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn bump<'g>(
        grads: &'g mut [Option<Vec<f64>>],
        id: VarId,
        len: usize,
    ) -> &'g mut Vec<f64> {
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let input_len = |id: VarId| self.nodes[id.0].value.len();
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                let ga = Self::bump(grads, *a, input_len(*a));
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += x;
                }
                let gb = Self::bump(grads, *b, input_len(*b));
                for (d, &x) in gb.iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::Sub(a, b) => {
                let ga = Self::bump(grads, *a, input_len(*a));
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += x;
                }
                let gb = Self::bump(grads, *b, input_len(*b));
                for (d, &x) in gb.iter_mut().zip(g) {
                    *d -= x;
                }
            }
            Op::Mul(a, b) => {
                let bv = self.nodes[b.0].value.clone();
                let av = self.nodes[a.0].value.clone();
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                let gb = Self::bump(grads, *b, input_len(*b));
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::Div(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] / bv[i];
                }
                let gb = Self::bump(grads, *b, input_len(*b));
                for i in 0..g.len() {
                    gb[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
            Op::Neg(a) => {
                let ga = Self::bump(grads, *a, input_len(*a));
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d -= x;
                }
            }
            Op::Scale(a, c) => {
                let ga = Self::bump(grads, *a, input_len(*a));
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += c * x;
                }
            }
            Op::AddConst(a) => {
                let ga = Self::bump(grads, *a, input_len(*a));
                for (d, &x) in ga.iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::MatMul(a, b) => {
                let na = &self.nodes[a.0];
                let nb = &self.nodes[b.0];
                let (m, k) = (na.dims[0], na.dims[1]);
                let av = na.value.clone();
                let bv = nb.value.clone();
                if nb.dims.len() == 1 {
                    // out[i] = sum_l A[i,l] b[l]
                    let ga = Self::bump(grads, *a, m * k);
                    for i in 0..m {
                        for l in 0..k {
                            ga[i * k + l] += g[i] * bv[l];
                        }
                    }
                    let gb = Self::bump(grads, *b, k);
                    for i in 0..m {
                        for l in 0..k {
                            gb[l] += g[i] * av[i * k + l];
                        }
                    }
                } else {
                    let n = nb.dims[1];
                    // dA = G B^T, dB = A^T G
                    let ga = Self::bump(grads, *a, m * k);
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * bv[l * n + j];
                            }
                            ga[i * k + l] += acc;
                        }
                    }
                    let gb = Self::bump(grads, *b, k * n);
                    for l in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i in 0..m {
                                acc += av[i * k + l] * g[i * n + j];
                            }
                            gb[l * n + j] += acc;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                let yv = node.value.clone();
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - yv[i] * yv[i]);
                }
            }
            Op::Sigmoid(a) => {
                let yv = node.value.clone();
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
            }
            Op::Relu(a) => {
                let xv = self.nodes[a.0].value.clone();
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Exp(a) => {
                let yv = node.value.clone();
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] * yv[i];
                }
            }
            Op::Log(a) => {
                let xv = self.nodes[a.0].value.clone();
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] / xv[i];
                }
            }
            Op::Softplus(a) => {
                let xv = self.nodes[a.0].value.clone();
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    ga[i] += g[i] * sigmoid(xv[i]);
                }
            }
            Op::Square(a) => {
                let xv = self.nodes[a.0].value.clone();
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    ga[i] += 2.0 * g[i] * xv[i];
                }
            }
            Op::Clamp(a, lo, hi) => {
                let xv = self.nodes[a.0].value.clone();
                let (lo, hi) = (*lo, *hi);
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..g.len() {
                    if xv[i] > lo && xv[i] < hi {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Sum(a) => {
                let ga = Self::bump(grads, *a, input_len(*a));
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean(a) => {
                let n = input_len(*a);
                let ga = Self::bump(grads, *a, n);
                let share = g[0] / n as f64;
                for d in ga.iter_mut() {
                    *d += share;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = input_len(p);
                    let gp = Self::bump(grads, p, len);
                    for i in 0..len {
                        gp[i] += g[offset + i];
                    }
                    offset += len;
                }
            }
            Op::Slice(a, start, len) => {
                let ga = Self::bump(grads, *a, input_len(*a));
                for i in 0..*len {
                    ga[start + i] += g[i];
                }
            }
        }
        Ok(())
    }
}
