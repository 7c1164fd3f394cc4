//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every value produced during a forward pass together
//! with the op that produced it. [`Graph::backward`] walks the tape in
//! reverse and returns gradients for every node that depends on a
//! [`Graph::variable`] leaf.

mod kernels;

use std::sync::Arc;

use crate::error::{shape_err, Result};
use crate::tensor::{numel, strides, Tensor};

pub use kernels::ConvGeom;
pub(crate) use kernels::{gemm, resize_bilinear as resize_bilinear_tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Abs(Var),
    SumAll(Var),
    SumAxis { input: Var, axis: usize },
    Reshape(Var),
    Gather { input: Var, index: Arc<Vec<usize>> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64> },
    Softmax(Var),
    Resize(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, for running-statistics updates.
    pub var: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
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

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that gradients are not propagated into.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out_shape = kernels::broadcast_shape(self.shape(a), self.shape(b))
            .ok_or_else(|| shape_err(name, format!("cannot broadcast {:?} with {:?}", self.shape(a), self.shape(b))))?;
        let value = kernels::broadcast_binary(self.value(a), self.value(b), &out_shape, f);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    /// Broadcasting element-wise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).scale(k);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(value, Op::Relu(a), ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let ng = self.ng(a);
        self.push(value, Op::Abs(a), ng)
    }

    /// Sign of every ReLU/abs input, in node order. Two evaluations of the
    /// same graph with equal signatures lie on the same linear piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = n.op {
                sig.extend(self.value(a).data().iter().map(|&v| v > 0.0));
            }
        }
        sig
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("sum_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..][..inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let value = Tensor::new(oshape, out)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::SumAxis { input: a, axis }, ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| shape_err("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Reshape(a), ng))
    }

    /// `out[i] = input[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(shape_err("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        let src = self.value(a).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err("gather", format!("index {bad} out of range for {} elements", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Gather { input: a, index: Arc::new(index) }, ng))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(shape_err("permute", format!("{axes:?} is not a permutation of {} axes", shape.len())));
        }
        let st = strides(&shape);
        let oshape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let ost: Vec<usize> = axes.iter().map(|&x| st[x]).collect();
        let mut index = Vec::with_capacity(numel(&shape));
        let mut idx = vec![0usize; oshape.len()];
        for _ in 0..numel(&oshape) {
            index.push(idx.iter().zip(&ost).map(|(i, s)| i * s).sum());
            for d in (0..oshape.len()).rev() {
                idx[d] += 1;
                if idx[d] < oshape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        self.gather(a, index, &oshape)
    }

    /// Picks index `i` along `axis`, removing the axis.
    pub fn select(&mut self, a: Var, axis: usize, i: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || i >= shape[axis] {
            return Err(shape_err("select", format!("index {i} on axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            index.extend((0..inner).map(|k| (o * n + i) * inner + k));
        }
        let mut oshape = shape;
        oshape.remove(axis);
        self.gather(a, index, &oshape)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be at least 2-D: {sa:?}, {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != kb || !(batch_b.is_empty() || batch_b == batch_a) {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b = {trans_b})")));
        }
        let nb: usize = batch_a.iter().product();
        let b_batched = !batch_b.is_empty();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; nb * m * n];
        for i in 0..nb {
            let bs = if b_batched { &bd[i * k * n..(i + 1) * k * n] } else { bd };
            gemm(m, k, n, &ad[i * m * k..(i + 1) * m * k], false, bs, trans_b, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let mut oshape = batch_a.to_vec();
        oshape.extend([m, n]);
        let value = Tensor::new(oshape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, ng))
    }

    /// Batched matrix product `a @ b`; `b` may be 2-D and shared by the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Batched `a @ bᵀ` where `b` stores `(…, n, k)`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// Affine map over the last axis: `x @ weightᵀ + bias` with weight `(out, in)`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let lead: usize = xs[..xs.len().saturating_sub(1)].iter().product();
        let inp = *xs.last().ok_or_else(|| shape_err("linear", "scalar input"))?;
        let flat = self.reshape(x, &[lead, inp])?;
        let y = self.matmul_nt(flat, weight)?;
        let y = match bias {
            Some(b) => self.add(y, b)?,
            None => y,
        };
        let mut oshape = xs[..xs.len() - 1].to_vec();
        oshape.push(self.shape(y)[1]);
        self.reshape(y, &oshape)
    }

    /// 2-D convolution, input (B, Cin, H, W), weight (Cout, Cin, kh, kw).
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: (usize, usize), pad: (usize, usize)) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(shape_err("conv2d", format!("input {xs:?} vs weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias {:?} for {} output channels", self.shape(b), ws[0])));
            }
        }
        let geom = ConvGeom {
            kh: ws[2],
            kw: ws[3],
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        };
        if geom.out_hw(xs[2], xs[3]).is_none() {
            return Err(shape_err("conv2d", format!("kernel {geom:?} does not fit input {xs:?}")));
        }
        let value = kernels::conv2d_forward(self.value(x), self.value(weight), bias.map(|b| self.value(b)), &geom);
        let ng = self.ng(x) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(value, Op::Conv2d { input: x, weight, bias, geom }, ng))
    }

    /// Training-mode batch norm over (B, H, W) of a (B, C, H, W) input.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err("batch_norm", format!("input {xs:?}, gamma {:?}", self.shape(gamma))));
        }
        let fwd = kernels::batch_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        let count = (xs[0] * xs[2] * xs[3]) as f64;
        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let stats = BatchStats {
            mean: fwd.mean,
            var: fwd.var.iter().map(|v| v * unbias).collect(),
        };
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            fwd.out,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
            },
            ng,
        );
        Ok((v, stats))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = kernels::softmax_last(self.value(a));
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Bilinear resize (half-pixel centres) of the two trailing axes.
    pub fn resize_bilinear(&mut self, a: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 || oh == 0 || ow == 0 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 {
            return Err(shape_err("resize", format!("cannot resize {s:?} to {oh}x{ow}")));
        }
        let value = kernels::resize_bilinear(self.value(a), oh, ow);
        let ng = self.ng(a);
        Ok(self.push(value, Op::Resize(a), ng))
    }

    /// Reverse pass from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(shape_err("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (target, contrib) in self.local_grads(node, &g) {
                if !self.ng(target) {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            // Non-leaf gradients are not retained.
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, kernels::reduce_to(g, val(*a).shape())),
                (*b, kernels::reduce_to(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => vec![
                (*a, kernels::reduce_to(g, val(*a).shape())),
                (*b, kernels::reduce_to(&g.scale(-1.0), val(*b).shape())),
            ],
            Op::Mul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.ng(*a) {
                    let full = kernels::broadcast_binary(g, val(*b), g.shape(), |x, y| x * y);
                    out.push((*a, kernels::reduce_to(&full, val(*a).shape())));
                }
                if self.ng(*b) {
                    let full = kernels::broadcast_binary(g, val(*a), g.shape(), |x, y| x * y);
                    out.push((*b, kernels::reduce_to(&full, val(*b).shape())));
                }
                out
            }
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::Relu(a) => {
                let x = val(*a);
                let data = x.data().iter().zip(g.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data).expect("relu grad"))]
            }
            Op::Abs(a) => {
                let x = val(*a);
                let data = x.data().iter().zip(g.data()).map(|(&x, &g)| g * sign(x)).collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), data).expect("abs grad"))]
            }
            Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::SumAxis { input, axis } => {
                let shape = val(*input).shape();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut data = vec![0.0; numel(shape)];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for k in 0..n {
                        data[(o * n + k) * inner..][..inner].copy_from_slice(src);
                    }
                }
                vec![(*input, Tensor::new(shape.to_vec(), data).expect("sum_axis grad"))]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape()).expect("reshape grad"))],
            Op::Gather { input, index } => {
                let shape = val(*input).shape();
                let mut data = vec![0.0; numel(shape)];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    data[i] += gv;
                }
                vec![(*input, Tensor::new(shape.to_vec(), data).expect("gather grad"))]
            }
            Op::MatMul { a, b, trans_b } => self.matmul_grads(*a, *b, *trans_b, g),
            Op::Conv2d { input, weight, bias, geom } => {
                let grads = kernels::conv2d_backward(
                    val(*input),
                    val(*weight),
                    geom,
                    g,
                    self.ng(*input),
                    self.ng(*weight),
                    bias.is_some_and(|b| self.ng(b)),
                );
                let mut out = vec![];
                if let Some(dx) = grads.dx {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*weight, dw));
                }
                if let (Some(b), Some(db)) = (bias, grads.db) {
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = kernels::batch_norm_backward(xhat, inv_std, val(*gamma), g);
                vec![(*input, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Softmax(a) => vec![(*a, kernels::softmax_last_backward(&node.value, g))],
            Op::Resize(a) => vec![(*a, kernels::resize_bilinear_backward(val(*a).shape(), g))],
        }
    }

    fn matmul_grads(&self, a: Var, b: Var, trans_b: bool, g: &Tensor) -> Vec<(Var, Tensor)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = ta.shape();
        let sb = tb.shape();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = g.shape()[g.ndim() - 1];
        let nb: usize = sa[..sa.len() - 2].iter().product();
        let b_batched = sb.len() > 2;
        let bstride = if b_batched { k * n } else { 0 };
        let mut out = vec![];
        if self.ng(a) {
            // dA = dC · op(B)ᵀ
            let mut da = vec![0.0; nb * m * k];
            for i in 0..nb {
                let bs = &tb.data()[i * bstride..i * bstride + k * n];
                let gs = &g.data()[i * m * n..(i + 1) * m * n];
                gemm(m, n, k, gs, false, bs, !trans_b, &mut da[i * m * k..(i + 1) * m * k], 0.0);
            }
            out.push((a, Tensor::new(sa.to_vec(), da).expect("matmul da")));
        }
        if self.ng(b) {
            let mut db = vec![0.0; tb.numel()];
            for i in 0..nb {
                let as_ = &ta.data()[i * m * k..(i + 1) * m * k];
                let gs = &g.data()[i * m * n..(i + 1) * m * n];
                let dst = &mut db[i * bstride..i * bstride + k * n];
                let beta = if b_batched || i == 0 { 0.0 } else { 1.0 };
                if trans_b {
                    // B stored (n, k): dB = dCᵀ · A
                    gemm(n, m, k, gs, true, as_, false, dst, beta);
                } else {
                    // dB = Aᵀ · dC
                    gemm(k, m, n, as_, true, gs, false, dst, beta);
                }
            }
            out.push((b, Tensor::new(sb.to_vec(), db).expect("matmul db")));
        }
        out
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
