//! Append-only tape recording one forward pass.
//!
//! Every op appends a node whose output value is stored on the tape.
//! Nodes are created in topological order, so [`Tape::backward`] walks them
//! in reverse index order. Parameters enter the tape through [`Tape::param`];
//! their gradients are accumulated into the owning [`ParamStore`].

use super::ops;
use super::params::{ParamId, ParamStore};
use super::tensor::{swap_axes, Tensor};
use crate::error::{Error, Result};

/// Target index skipped by [`Tape::cross_entropy`].
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a user-supplied backward rule.
///
/// `backward` receives the forward inputs, the forward output and the
/// upstream gradient, and must return one gradient per input with the
/// input's shape. The rule is used verbatim, so it may return a surrogate
/// (for example a straight-through gradient) instead of the true derivative.
pub trait CustomOp {
    fn name(&self) -> &str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>>;
}

type BackwardFn = dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>>;

struct FnOp {
    name: String,
    backward: Box<BackwardFn>,
}

impl CustomOp for FnOp {
    fn name(&self) -> &str {
        &self.name
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Tensor>> {
        (self.backward)(inputs, output, grad)
    }
}

enum Op {
    Leaf,
    Add,
    AddBias,
    Mul,
    Scale(f32),
    MatMul,
    BatchMatMul,
    Gelu,
    Softmax,
    LayerNorm {
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Embedding {
        ids: Vec<usize>,
    },
    CrossEntropy {
        probs: Vec<f32>,
        targets: Vec<usize>,
        count: usize,
    },
    Transpose(usize, usize),
    Reshape,
    Slice {
        axis: usize,
        start: usize,
    },
    Custom(Box<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::AddBias => "add_bias",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::MatMul => "matmul",
            Op::BatchMatMul => "bmm",
            Op::Gelu => "gelu",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Transpose(..) => "transpose",
            Op::Reshape => "reshape",
            Op::Slice { .. } => "slice",
            Op::Custom(op) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant or input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a parameter; its gradient flows back into `store` on backward.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad: p.requires_grad,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Element-wise sum. `b` may also be a vector matching the last axis of
    /// `a`, in which case it is broadcast as a bias.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            let out = ops::zip(self.value(a), self.value(b), |x, y| x + y);
            return Ok(self.push(out, Op::Add, &[a, b]));
        }
        if sb.len() == 1 && sb[0] == self.value(a).last_dim() {
            let out = ops::add_bias(self.value(a), self.value(b));
            return Ok(self.push(out, Op::AddBias, &[a, b]));
        }
        Err(Error::shape("add", sa, sb))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = ops::zip(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(c), &[a])
    }

    /// `a[..., k] x b[k, n] -> [..., n]`, or a batched product when both
    /// operands are rank 3 with equal leading size.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() == 3 && sb.len() == 3 {
            if sa[0] != sb[0] || sa[2] != sb[1] {
                return Err(Error::shape("matmul", &sa, &sb));
            }
            let out = ops::bmm(self.value(a), self.value(b));
            return Ok(self.push(out, Op::BatchMatMul, &[a, b]));
        }
        if sa.is_empty() || sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let data = ops::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::MatMul, &[a, b]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(ops::gelu);
        self.push(out, Op::Gelu, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = ops::softmax(self.value(a), false);
        self.push(out, Op::Softmax, &[a])
    }

    /// Softmax over the last axis of square `[.., T, T]` score blocks with
    /// future positions masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
            return Err(Error::shape("causal_softmax", s, &[]));
        }
        let out = ops::softmax(self.value(a), true);
        Ok(self.push(out, Op::Softmax, &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (out, xhat, rstd) = ops::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps);
        Ok(self.push(out, Op::LayerNorm { xhat, rstd }, &[x, gamma, beta]))
    }

    /// Gathers rows of `table` (`[vocab, d]`); output shape is `prefix + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || prefix.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", &st, prefix));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::Invalid(format!(
                "embedding: id {bad} out of range for vocab {}",
                st[0]
            )));
        }
        let d = st[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = prefix.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Embedding { ids: ids.to_vec() }, &[table]))
    }

    /// Mean cross entropy of `logits[.., vocab]` against one target per row.
    /// Rows whose target is [`IGNORE_INDEX`] are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v.max(1);
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_INDEX && t >= v) {
            return Err(Error::Invalid(format!(
                "cross_entropy: target {bad} out of range for {v} classes"
            )));
        }
        let (loss, probs, count) = ops::cross_entropy(lv.data(), targets, v);
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: every target is ignored".into()));
        }
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs,
                targets: targets.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let s = self.shape(a);
        if ax0 >= s.len() || ax1 >= s.len() {
            return Err(Error::shape("transpose", s, &[ax0, ax1]));
        }
        let (data, shape) = swap_axes(self.value(a).data(), s, ax0, ax1);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Transpose(ax0, ax1), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape, &[a]))
    }

    /// Keeps indices `start..end` of `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, end]));
        }
        let out = ops::slice(self.value(a), axis, start, end);
        Ok(self.push(out, Op::Slice { axis, start }, &[a]))
    }

    /// Records an op whose output was computed by the caller and whose
    /// backward rule is `op`.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        self.push(output, Op::Custom(op), inputs)
    }

    /// Closure form of [`Tape::custom`].
    pub fn custom_fn<F, B>(&mut self, name: &str, inputs: &[Var], forward: F, backward: B) -> Result<Var>
    where
        F: FnOnce(&[&Tensor]) -> Result<Tensor>,
        B: Fn(&[&Tensor], &Tensor, &Tensor) -> Result<Vec<Tensor>> + 'static,
    {
        let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = forward(&vals)?;
        let op = FnOp {
            name: name.to_string(),
            backward: Box::new(backward),
        };
        Ok(self.custom(Box::new(op), inputs, out))
    }

    /// Backpropagates from a scalar loss.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let seed = Tensor::full(lv.shape(), 1.0);
        self.backward_seeded(&[(loss, seed)], store)
    }

    /// Backpropagates from several roots, each seeded with an explicit
    /// upstream gradient of the root's shape.
    pub fn backward_seeded(&self, roots: &[(Var, Tensor)], store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Backward("tape is empty".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (v, seed) in roots {
            if seed.shape() != self.shape(*v) {
                return Err(Error::shape("backward seed", seed.shape(), self.shape(*v)));
            }
            accumulate(&mut grads[v.0], seed.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                if let Some(pid) = node.param {
                    store.accumulate_grad(pid, &g);
                }
                grads[idx] = Some(g);
                continue;
            }
            let input_grads = self.node_backward(node, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    if self.nodes[*inp].requires_grad {
                        accumulate(&mut grads[*inp], ig);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let inp = |i: usize| &self.nodes[node.inputs[i]].value;
        let needs = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::AddBias => {
                let d = g.last_dim();
                let mut db = vec![0.0f32; d];
                for row in g.data().chunks(d) {
                    for (a, b) in db.iter_mut().zip(row) {
                        *a += *b;
                    }
                }
                vec![Some(g.clone()), Some(Tensor::from_vec(db))]
            }
            Op::Mul => vec![
                needs(0).then(|| ops::zip(g, inp(1), |x, y| x * y)),
                needs(1).then(|| ops::zip(g, inp(0), |x, y| x * y)),
            ],
            Op::Scale(c) => vec![Some(g.map(|x| x * c))],
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let k = b.shape()[0];
                let n = b.shape()[1];
                let m = a.numel() / k.max(1);
                let da = needs(0)
                    .then(|| Tensor::new(a.shape().to_vec(), ops::matmul_bt(g.data(), b.data(), m, n, k)))
                    .transpose()?;
                let db = needs(1)
                    .then(|| Tensor::new(b.shape().to_vec(), ops::matmul_at(a.data(), g.data(), m, k, n)))
                    .transpose()?;
                vec![da, db]
            }
            Op::BatchMatMul => {
                let (a, b) = (inp(0), inp(1));
                let (bs, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
                let mut da = needs(0).then(|| vec![0.0f32; a.numel()]);
                let mut db = needs(1).then(|| vec![0.0f32; b.numel()]);
                for i in 0..bs {
                    let gs = &g.data()[i * m * n..(i + 1) * m * n];
                    let asl = &a.data()[i * m * k..(i + 1) * m * k];
                    let bsl = &b.data()[i * k * n..(i + 1) * k * n];
                    if let Some(da) = da.as_mut() {
                        da[i * m * k..(i + 1) * m * k].copy_from_slice(&ops::matmul_bt(gs, bsl, m, n, k));
                    }
                    if let Some(db) = db.as_mut() {
                        db[i * k * n..(i + 1) * k * n].copy_from_slice(&ops::matmul_at(asl, gs, m, k, n));
                    }
                }
                vec![
                    da.map(|d| Tensor::new(a.shape().to_vec(), d)).transpose()?,
                    db.map(|d| Tensor::new(b.shape().to_vec(), d)).transpose()?,
                ]
            }
            Op::Gelu => vec![Some(ops::zip(g, inp(0), |gv, x| gv * ops::gelu_grad(x)))],
            Op::Softmax => vec![Some(ops::softmax_backward(&node.value, g))],
            Op::LayerNorm { xhat, rstd } => {
                let (dx, dgamma, dbeta) = ops::layer_norm_backward(g, inp(1), xhat, rstd);
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }
            Op::Embedding { ids } => {
                let table = inp(0);
                let d = table.shape()[1];
                let mut dt = Tensor::zeros(table.shape());
                let buf = dt.data_mut();
                for (row, &id) in g.data().chunks(d).zip(ids) {
                    for (a, b) in buf[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *a += *b;
                    }
                }
                vec![Some(dt)]
            }
            Op::CrossEntropy { probs, targets, count } => {
                let logits = inp(0);
                let v = logits.last_dim();
                let scale = g.data()[0] / *count as f32;
                let mut d = probs.clone();
                for (row, &t) in d.chunks_mut(v).zip(targets) {
                    if t == IGNORE_INDEX {
                        row.iter_mut().for_each(|x| *x = 0.0);
                        continue;
                    }
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                vec![Some(Tensor::new(logits.shape().to_vec(), d)?)]
            }
            Op::Transpose(a0, a1) => {
                let (data, shape) = swap_axes(g.data(), g.shape(), *a0, *a1);
                vec![Some(Tensor::new(shape, data)?)]
            }
            Op::Reshape => vec![Some(g.clone().reshaped(inp(0).shape())?)],
            Op::Slice { axis, start } => vec![Some(ops::unslice(g, inp(0).shape(), *axis, *start))],
            Op::Custom(op) => {
                let ins: Vec<&Tensor> = (0..node.inputs.len()).map(inp).collect();
                let out = op.backward(&ins, &node.value, g)?;
                if out.len() != ins.len() {
                    return Err(Error::Backward(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        out.len(),
                        ins.len()
                    )));
                }
                for (gi, xi) in out.iter().zip(&ins) {
                    if gi.shape() != xi.shape() {
                        return Err(Error::Backward(format!(
                            "custom op `{}` returned gradient of shape {:?} for input of shape {:?}",
                            op.name(),
                            gi.shape(),
                            xi.shape()
                        )));
                    }
                }
                out.into_iter().map(Some).collect()
            }
        })
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &str {
        self.nodes[v.0].op.name()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}
