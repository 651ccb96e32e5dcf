use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::kernels::{axis_strides, matmul_nn, matmul_nt, matmul_tn, transpose};
use super::{DenseTensor, ParamId, ParamStore};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Whether stochastic layers are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    node: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Rank-1 operand broadcast across the trailing axis of the first operand.
    AddBias(usize, usize),
    SubBias(usize, usize),
    MulBias(usize, usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Scale(usize, f64),
    Softmax { x: usize, axis: usize },
    Dropout { x: usize, mask: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<f64> },
    Sum(usize),
    MeanRows(usize),
    MaxRows { x: usize, argmax: Vec<usize> },
    ConcatCols(Vec<usize>),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | SubBias(a, b)
            | MulBias(a, b) => vec![*a, *b],
            Transpose(a) | Reshape(a) | Tanh(a) | Exp(a) | Log(a) | Relu(a) | Scale(a, _)
            | Sum(a) | MeanRows(a) => vec![*a],
            Softmax { x, .. } | Dropout { x, .. } | MaxRows { x, .. } => vec![*x],
            CrossEntropy { logits, .. } => vec![*logits],
            ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    value: DenseTensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so every parent index is smaller than
/// its child's. [`Tape::backward`] consumes the tape.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    Trailing,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.node >= self.nodes.len() {
            return Err(Error::Contract("variable does not belong to this tape".into()));
        }
        Ok(v.node)
    }

    fn node(&self, i: usize) -> &Node {
        &self.nodes[i]
    }

    fn push(&mut self, value: DenseTensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad)
            || matches!(op, Op::Param(_));
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: DenseTensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            node: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &DenseTensor {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("foreign variable")].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: DenseTensor) -> Var {
        self.push_with(t, Op::Leaf, false)
    }

    /// Input that takes part in differentiation but is not a stored parameter.
    /// Its gradient is reachable only through [`Tape::backward_with_inputs`].
    pub fn input(&mut self, t: DenseTensor) -> Var {
        self.push_with(t, Op::Leaf, true)
    }

    /// Snapshot of a stored parameter. Gradients flow back into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ad, bd) = (self.node(ia).value.dims(), self.node(ib).value.dims());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: ad.to_vec(),
                rhs: bd.to_vec(),
            });
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let out = matmul_nn(
            self.node(ia).value.values(),
            self.node(ib).value.values(),
            m,
            k,
            n,
        );
        let t = DenseTensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let d = self.node(ia).value.dims().to_vec();
        if d.len() != 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: d,
                rhs: vec![],
            });
        }
        let out = transpose(self.node(ia).value.values(), d[0], d[1]);
        let t = DenseTensor::matrix(d[1], d[0], out)?;
        Ok(self.push(t, Op::Transpose(ia)))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = self.node(ia).value.clone().reshaped(dims)?;
        Ok(self.push(t, Op::Reshape(ia)))
    }

    fn broadcast_kind(&self, op: &'static str, ia: usize, ib: usize) -> Result<Broadcast> {
        let (a, b) = (&self.node(ia).value, &self.node(ib).value);
        if a.dims() == b.dims() {
            Ok(Broadcast::Same)
        } else if b.shape().rank() == 1 && b.numel() == a.shape().last() {
            Ok(Broadcast::Trailing)
        } else {
            Err(Error::Dimension {
                op,
                lhs: a.dims().to_vec(),
                rhs: b.dims().to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        same: fn(usize, usize) -> Op,
        bias: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let kind = self.broadcast_kind(name, ia, ib)?;
        let (av, bv) = (&self.node(ia).value, &self.node(ib).value);
        let n = bv.numel();
        let out: Vec<f64> = av
            .values()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match kind {
                    Broadcast::Same => bv.values()[i],
                    Broadcast::Trailing => bv.values()[i % n],
                };
                f(x, y)
            })
            .collect();
        let t = DenseTensor::new(av.dims(), out)?;
        let op = match kind {
            Broadcast::Same => same(ia, ib),
            Broadcast::Trailing => bias(ia, ib),
        };
        Ok(self.push(t, op))
    }

    /// Elementwise sum; `b` may be a vector matching the trailing axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add, Op::AddBias)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub, Op::SubBias)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul, Op::MulBias)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.node(ia).value;
        let out = v.values().iter().map(|&x| f(x)).collect();
        let t = DenseTensor::new(v.dims(), out)?;
        Ok(self.push(t, op(ia)))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, |i| Op::Scale(i, c))
    }

    /// Elementwise exponential. Inputs that would overflow are rejected.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if let Some(x) = self.node(ia).value.values().iter().find(|x| !x.exp().is_finite()) {
            return Err(Error::Domain {
                op: "exp",
                detail: format!("exp({x}) is not finite"),
            });
        }
        self.unary(a, f64::exp, Op::Exp)
    }

    /// Elementwise natural log of strictly positive inputs.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if let Some(x) = self.node(ia).value.values().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("log({x}) requires a strictly positive input"),
            });
        }
        self.unary(a, f64::ln, Op::Log)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.node(ia).value;
        if axis >= v.shape().rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of bounds for {:?}",
                v.dims()
            )));
        }
        let (outer, len, inner) = axis_strides(v.dims(), axis);
        let x = v.values();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (x[at(k)] - max).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    out[at(k)] /= sum;
                }
            }
        }
        let t = DenseTensor::new(v.dims(), out)?;
        Ok(self.push(t, Op::Softmax { x: ia, axis }))
    }

    /// Inverted dropout. Eval mode and `p == 0` return `a` itself.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        let ia = self.idx(a)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let v = &self.node(ia).value;
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = v.values().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = DenseTensor::new(v.dims(), out)?;
        Ok(self.push(t, Op::Dropout { x: ia, mask }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, via log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let v = &self.node(il).value;
        if v.shape().rank() != 2 || v.rows() != targets.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: v.dims().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let (b, c) = (v.rows(), v.cols());
        if let Some((row, &label)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::Label {
                row,
                label,
                classes: c,
            });
        }
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let t = DenseTensor::scalar(total / b as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.node(ia).value.values().iter().sum();
        Ok(self.push(DenseTensor::scalar(s), Op::Sum(ia)))
    }

    /// `[N×D] → [D]` arithmetic mean over rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.node(ia).value;
        if v.shape().rank() != 2 {
            return Err(Error::Dimension {
                op: "mean_rows",
                lhs: v.dims().to_vec(),
                rhs: vec![],
            });
        }
        let (n, d) = (v.rows(), v.cols());
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let t = DenseTensor::vector(out)?;
        Ok(self.push(t, Op::MeanRows(ia)))
    }

    /// `[N×D] → [D]` columnwise maximum; ties resolve to the first row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.node(ia).value;
        if v.shape().rank() != 2 {
            return Err(Error::Dimension {
                op: "max_rows",
                lhs: v.dims().to_vec(),
                rhs: vec![],
            });
        }
        let d = v.cols();
        let mut out = v.row(0).to_vec();
        let mut argmax = vec![0; d];
        for r in 1..v.rows() {
            for (j, &x) in v.row(r).iter().enumerate() {
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = r;
                }
            }
        }
        let t = DenseTensor::vector(out)?;
        Ok(self.push(t, Op::MaxRows { x: ia, argmax }))
    }

    /// Joins rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = ids
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rows = self.node(*first).value.dims()[0];
        for &i in &ids {
            let d = self.node(i).value.dims();
            if d.len() != 2 || d[0] != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.node(*first).value.dims().to_vec(),
                    rhs: d.to_vec(),
                });
            }
        }
        let total: usize = ids.iter().map(|&i| self.node(i).value.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &ids {
                out.extend_from_slice(self.node(i).value.row(r));
            }
        }
        let t = DenseTensor::matrix(rows, total, out)?;
        Ok(self.push(t, Op::ConcatCols(ids)))
    }

    /// Reverse sweep from a scalar root. Parameter gradients are added to the
    /// store's accumulators; the tape is consumed.
    pub fn backward(self, root: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_with_inputs(root, store, &[]).map(|_| ())
    }

    /// Like [`Tape::backward`], additionally returning the gradients of the
    /// listed non-parameter inputs (zeros when unreachable).
    pub fn backward_with_inputs(
        self,
        root: Var,
        store: &mut ParamStore,
        inputs: &[Var],
    ) -> Result<Vec<DenseTensor>> {
        let r = self.idx(root)?;
        if self.nodes[r].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got {:?}",
                self.nodes[r].value.dims()
            )));
        }
        let input_ids = inputs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[r] = Some(vec![1.0]);
        let mut input_grads: Vec<Option<Vec<f64>>> = vec![None; input_ids.len()];

        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads, store);
            for (slot, &inp) in input_ids.iter().enumerate() {
                if inp == i {
                    input_grads[slot] = Some(g.clone());
                }
            }
        }
        input_ids
            .iter()
            .zip(input_grads)
            .map(|(&i, g)| {
                let dims = self.nodes[i].value.dims();
                match g {
                    Some(g) => DenseTensor::new(dims, g),
                    None => DenseTensor::zeros(dims),
                }
            })
            .collect()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.values();
        let wants = |j: usize| self.nodes[j].requires_grad;
        let mut send = |j: usize, contrib: Vec<f64>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(pid) => store.accumulate(*pid, g),
            Op::MatMul(a, b) => {
                let (ad, bd) = (self.nodes[*a].value.dims(), self.nodes[*b].value.dims());
                let (m, k, n) = (ad[0], ad[1], bd[1]);
                if wants(*a) {
                    send(*a, matmul_nt(g, val(*b), m, n, k));
                }
                if wants(*b) {
                    send(*b, matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let d = node.value.dims();
                send(*a, transpose(g, d[0], d[1]));
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect());
            }
            Op::AddBias(a, b) | Op::SubBias(a, b) => {
                let sign = if matches!(node.op, Op::SubBias(..)) { -1.0 } else { 1.0 };
                send(*a, g.to_vec());
                let n = self.nodes[*b].value.numel();
                let mut gb = vec![0.0; n];
                for (k, x) in g.iter().enumerate() {
                    gb[k % n] += sign * x;
                }
                send(*b, gb);
            }
            Op::MulBias(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let n = bv.len();
                send(*a, g.iter().enumerate().map(|(k, x)| x * bv[k % n]).collect());
                let mut gb = vec![0.0; n];
                for (k, x) in g.iter().enumerate() {
                    gb[k % n] += x * av[k];
                }
                send(*b, gb);
            }
            Op::Tanh(a) => {
                let y = node.value.values();
                send(*a, g.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect());
            }
            Op::Exp(a) => {
                let y = node.value.values();
                send(*a, g.iter().zip(y).map(|(d, y)| d * y).collect());
            }
            Op::Log(a) => {
                send(*a, g.iter().zip(val(*a)).map(|(d, x)| d / x).collect());
            }
            Op::Relu(a) => {
                send(
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(d, &x)| if x > 0.0 { *d } else { 0.0 })
                        .collect(),
                );
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|d| d * c).collect()),
            Op::Softmax { x, axis } => {
                let y = node.value.values();
                let (outer, len, inner) = axis_strides(node.value.dims(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * len * inner + k * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::Dropout { x, mask } => {
                send(*x, g.iter().zip(mask).map(|(d, m)| d * m).collect());
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.nodes[*logits].value.cols();
                let scale = g[0] / targets.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] -= scale;
                }
                send(*logits, dl);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.nodes[*a].value.numel()]),
            Op::MeanRows(a) => {
                let n = self.nodes[*a].value.rows();
                let inv = 1.0 / n as f64;
                let row: Vec<f64> = g.iter().map(|x| x * inv).collect();
                send(*a, row.repeat(n));
            }
            Op::MaxRows { x, argmax } => {
                let d = argmax.len();
                let mut dx = vec![0.0; self.nodes[*x].value.numel()];
                for (j, &r) in argmax.iter().enumerate() {
                    dx[r * d + j] = g[j];
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    send(p, gp);
                    offset += w;
                }
            }
        }
    }
}
