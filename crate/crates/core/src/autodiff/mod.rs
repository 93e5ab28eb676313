//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order. Each recorded node
//! owns its forward value; [`Graph::backward`] walks the tape in exact reverse
//! order and returns a [`Gradients`] table. Handles ([`Var`]) are plain indices
//! into the tape, so they are `Copy` and only meaningful for the graph that
//! created them.

mod ops;
pub mod gradcheck;

use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::{cast, gemm_nn_acc, gemm_nt, gemm_tn, Float, Tensor};

pub(crate) use ops::permute_data;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, trans_b: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    MulRows { x: Var, m: Var },
    Gelu { x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    MaskedSoftmax { scores: Var, keep: Var, ratio: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { base: Var, values: Var, idx: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    MeanLast { x: Var },
    MaskedMeanRows { u: Var, d: Var },
    BroadcastAxis { x: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Mse { a: Var, b: Var },
    KlDiv { log_p: Var, q: Var },
    MaskedTokenMse { t: Var, target: Var, mask: Var },
    DepthwiseConv { x: Var, w: Var, b: Var, k: usize },
    AvgPool { x: Var, k: usize },
    StraightThrough { soft: Var },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulRows { .. } => "mul_rows",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::MeanLast { .. } => "mean_last",
            Op::MaskedMeanRows { .. } => "masked_mean_rows",
            Op::BroadcastAxis { .. } => "broadcast_axis",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Mse { .. } => "mse",
            Op::KlDiv { .. } => "kl_div",
            Op::MaskedTokenMse { .. } => "masked_token_mse",
            Op::DepthwiseConv { .. } => "depthwise_conv2d",
            Op::AvgPool { .. } => "avg_pool_2d",
            Op::StraightThrough { .. } => "straight_through",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// The operation tape.
pub struct Graph<T: Float> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf tensor.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes.borrow()[v.0].value.item()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes.borrow()[v.0].op.name()
    }

    /// Fails with the first node (in tape order) holding a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        for (i, n) in nodes.iter().enumerate() {
            if !n.value.is_finite() {
                return Err(Error::NonFinite {
                    op: n.op.name(),
                    node: i,
                });
            }
        }
        Ok(())
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "loss must be a scalar, got shape {:?}",
                    nodes[loss.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads)?;
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out: Vec<Option<Tensor<T>>> = Vec::with_capacity(nodes.len());
        for (n, g) in nodes.iter().zip(grads) {
            let t = match (&n.op, n.requires_grad, g) {
                (Op::Leaf, true, Some(g)) => Some(Tensor::new(n.value.shape().to_vec(), g)?),
                (Op::Leaf, true, None) => Some(Tensor::zeros(n.value.shape())),
                _ => None,
            };
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }
}

/// Gradients of every `requires_grad` leaf after [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn buf<'a, T: Float>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
}

fn acc<T: Float>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    if let Some(b) = buf(nodes, grads, v) {
        for (d, s) in b.iter_mut().zip(g) {
            *d += *s;
        }
    }
}

fn backprop<T: Float>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) -> Result<()> {
    let out = &nodes[i].value;
    let val = |v: Var| &nodes[v.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let p = val(*b).shape()[1];
            let bv = val(*b).data().to_vec();
            let av = val(*a).data().to_vec();
            if let Some(da) = buf(nodes, grads, *a) {
                gemm_nt(m, p, k, g, &bv, da, true);
            }
            if let Some(db) = buf(nodes, grads, *b) {
                gemm_tn(k, m, p, &av, g, db, true);
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let ash = val(*a).shape();
            let (bn, m, k) = (ash[0], ash[1], ash[2]);
            let p = out.shape()[2];
            let av = val(*a).data();
            let bv = val(*b).data();
            let bsz = k * p;
            if let Some(da) = buf(nodes, grads, *a) {
                parallel::for_each_chunk(da, m * k, |bi, da| {
                    let gb = &g[bi * m * p..(bi + 1) * m * p];
                    let bb = &bv[bi * bsz..(bi + 1) * bsz];
                    if *trans_b {
                        gemm_nn_acc(m, p, k, gb, bb, da, true);
                    } else {
                        gemm_nt(m, p, k, gb, bb, da, true);
                    }
                });
            }
            if let Some(db) = buf(nodes, grads, *b) {
                parallel::for_each_chunk(db, bsz, |bi, db| {
                    let gb = &g[bi * m * p..(bi + 1) * m * p];
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    if *trans_b {
                        gemm_tn(p, m, k, gb, ab, db, true);
                    } else {
                        gemm_tn(k, m, p, ab, gb, db, true);
                    }
                });
            }
            let _ = bn;
        }
        Op::Linear { x, w, b } => {
            let k = val(*w).shape()[0];
            let p = val(*w).shape()[1];
            let r = val(*x).len() / k;
            if let Some(dx) = buf(nodes, grads, *x) {
                gemm_nt(r, p, k, g, val(*w).data(), dx, true);
            }
            if let Some(dw) = buf(nodes, grads, *w) {
                gemm_tn(k, r, p, val(*x).data(), g, dw, true);
            }
            if let Some(b) = b {
                if let Some(db) = buf(nodes, grads, *b) {
                    for row in g.chunks(p) {
                        for (d, s) in db.iter_mut().zip(row) {
                            *d += *s;
                        }
                    }
                }
            }
        }
        Op::Add { a, b } => {
            acc(nodes, grads, *a, g);
            acc(nodes, grads, *b, g);
        }
        Op::Sub { a, b } => {
            acc(nodes, grads, *a, g);
            if let Some(db) = buf(nodes, grads, *b) {
                for (d, s) in db.iter_mut().zip(g) {
                    *d -= *s;
                }
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = buf(nodes, grads, *a) {
                for ((d, s), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += *s * *y;
                }
            }
            if let Some(db) = buf(nodes, grads, *b) {
                for ((d, s), y) in db.iter_mut().zip(g).zip(av) {
                    *d += *s * *y;
                }
            }
        }
        Op::Scale { x, c } => {
            if let Some(dx) = buf(nodes, grads, *x) {
                for (d, s) in dx.iter_mut().zip(g) {
                    *d += *s * *c;
                }
            }
        }
        Op::AddScalar { x } => acc(nodes, grads, *x, g),
        Op::MulRows { x, m } => {
            let c = val(*x).last_dim();
            let (xv, mv) = (val(*x).data(), val(*m).data());
            if let Some(dx) = buf(nodes, grads, *x) {
                for (r, (drow, grow)) in dx.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                    let s = mv[r];
                    for (d, gg) in drow.iter_mut().zip(grow) {
                        *d += *gg * s;
                    }
                }
            }
            if let Some(dm) = buf(nodes, grads, *m) {
                for (r, d) in dm.iter_mut().enumerate() {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    *d += xr.iter().zip(gr).map(|(a, b)| *a * *b).sum::<T>();
                }
            }
        }
        Op::Gelu { x } => {
            let xv = val(*x).data();
            if let Some(dx) = buf(nodes, grads, *x) {
                for ((d, s), &v) in dx.iter_mut().zip(g).zip(xv) {
                    *d += *s * ops::gelu_grad(v);
                }
            }
        }
        Op::Softmax { x } => {
            let c = out.last_dim();
            let y = out.data();
            if let Some(dx) = buf(nodes, grads, *x) {
                parallel::for_each_chunk(dx, c, |r, drow| {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..c {
                        drow[j] += yr[j] * (gr[j] - dot);
                    }
                });
            }
        }
        Op::LogSoftmax { x } => {
            let c = out.last_dim();
            let y = out.data();
            if let Some(dx) = buf(nodes, grads, *x) {
                parallel::for_each_chunk(dx, c, |r, drow| {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let gs: T = gr.iter().copied().sum();
                    for j in 0..c {
                        drow[j] += gr[j] - yr[j].exp() * gs;
                    }
                });
            }
        }
        Op::MaskedSoftmax {
            scores,
            keep,
            ratio,
        } => {
            let sh = val(*scores).shape();
            let (bn, h, n) = (sh[0], sh[1], sh[2]);
            let a = out.data();
            // (g_j - sum_k g_k A_k) per entry, reused by both parents.
            let mut centered = vec![T::zero(); a.len()];
            parallel::for_each_chunk(&mut centered, n, |r, crow| {
                let ar = &a[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let dot: T = ar.iter().zip(gr).map(|(x, y)| *x * *y).sum();
                for j in 0..n {
                    crow[j] = gr[j] - dot;
                }
            });
            if let Some(ds) = buf(nodes, grads, *scores) {
                for ((d, c), av) in ds.iter_mut().zip(&centered).zip(a) {
                    *d += *av * *c;
                }
            }
            if let Some(dk) = buf(nodes, grads, *keep) {
                for b in 0..bn {
                    for hh in 0..h {
                        for i in 0..n {
                            let base = ((b * h + hh) * n + i) * n;
                            for j in 0..n {
                                if i != j {
                                    dk[b * n + j] += centered[base + j] * ratio[base + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = out.last_dim();
            let gv = val(*gamma).data();
            if let Some(dg) = buf(nodes, grads, *gamma) {
                for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dg[j] += gr[j] * xr[j];
                    }
                }
            }
            if let Some(db) = buf(nodes, grads, *beta) {
                for gr in g.chunks(c) {
                    for j in 0..c {
                        db[j] += gr[j];
                    }
                }
            }
            if let Some(dx) = buf(nodes, grads, *x) {
                let inv_c: T = cast(1.0 / c as f64);
                parallel::for_each_chunk(dx, c, |r, drow| {
                    let gr = &g[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xr[j];
                    }
                    mean_d *= inv_c;
                    mean_dx *= inv_c;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        drow[j] += rstd[r] * (d - mean_d - xr[j] * mean_dx);
                    }
                });
            }
        }
        Op::Reshape { x } => acc(nodes, grads, *x, g),
        Op::Permute { x, perm } => {
            if nodes[x.0].requires_grad {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (gp, _) = permute_data(g, out.shape(), &inv);
                acc(nodes, grads, *x, &gp);
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = val(*x).shape();
            let len = out.shape()[*axis];
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis + 1..].iter().product();
            let full = xs[*axis];
            if let Some(dx) = buf(nodes, grads, *x) {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut dx[(o * full + start) * inner..(o * full + start + len) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let os = out.shape();
            let outer: usize = os[..*axis].iter().product();
            let inner: usize = os[*axis + 1..].iter().product();
            let total = os[*axis];
            let mut offset = 0;
            for v in inputs {
                let len = val(*v).shape()[*axis];
                if let Some(dv) = buf(nodes, grads, *v) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut dv[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::GatherRows { x, idx } => {
            let c = out.last_dim();
            if let Some(dx) = buf(nodes, grads, *x) {
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[r * c + j];
                    }
                }
            }
        }
        Op::ScatterRows { base, values, idx } => {
            let c = out.last_dim();
            if let Some(db) = buf(nodes, grads, *base) {
                for (d, s) in db.iter_mut().zip(g) {
                    *d += *s;
                }
                for &r in idx {
                    for j in 0..c {
                        db[r * c + j] -= g[r * c + j];
                    }
                }
            }
            if let Some(dv) = buf(nodes, grads, *values) {
                for (r, &dst) in idx.iter().enumerate() {
                    for j in 0..c {
                        dv[r * c + j] += g[dst * c + j];
                    }
                }
            }
        }
        Op::Sum { x } => {
            if let Some(dx) = buf(nodes, grads, *x) {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean { x } => {
            let n = val(*x).len();
            if let Some(dx) = buf(nodes, grads, *x) {
                let s = g[0] / cast(n as f64);
                for d in dx.iter_mut() {
                    *d += s;
                }
            }
        }
        Op::MeanLast { x } => {
            let c = val(*x).last_dim();
            if let Some(dx) = buf(nodes, grads, *x) {
                let inv: T = cast(1.0 / c as f64);
                for (r, drow) in dx.chunks_mut(c).enumerate() {
                    for d in drow.iter_mut() {
                        *d += g[r] * inv;
                    }
                }
            }
        }
        Op::MaskedMeanRows { u, d } => {
            let us = val(*u).shape();
            let (bn, n, c) = (us[0], us[1], us[2]);
            let (uv, dv) = (val(*u).data(), val(*d).data());
            let ov = out.data();
            let sums: Vec<T> = (0..bn)
                .map(|b| dv[b * n..(b + 1) * n].iter().copied().sum())
                .collect();
            if let Some(du) = buf(nodes, grads, *u) {
                for b in 0..bn {
                    for i in 0..n {
                        let w = dv[b * n + i] / sums[b];
                        for j in 0..c {
                            du[(b * n + i) * c + j] += g[b * c + j] * w;
                        }
                    }
                }
            }
            if let Some(dd) = buf(nodes, grads, *d) {
                for b in 0..bn {
                    for i in 0..n {
                        let mut s = T::zero();
                        for j in 0..c {
                            s += g[b * c + j] * (uv[(b * n + i) * c + j] - ov[b * c + j]);
                        }
                        dd[b * n + i] += s / sums[b];
                    }
                }
            }
        }
        Op::BroadcastAxis { x, axis } => {
            let xs = val(*x).shape();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis..].iter().product();
            let n = out.shape()[*axis];
            if let Some(dx) = buf(nodes, grads, *x) {
                for o in 0..outer {
                    for r in 0..n {
                        let src = &g[(o * n + r) * inner..(o * n + r + 1) * inner];
                        let dst = &mut dx[o * inner..(o + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let k = val(*logits).last_dim();
            let bn = labels.len();
            if let Some(dl) = buf(nodes, grads, *logits) {
                let s = g[0] / cast(bn as f64);
                for (b, &y) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == y { T::one() } else { T::zero() };
                        dl[b * k + j] += s * (probs[b * k + j] - onehot);
                    }
                }
            }
        }
        Op::Mse { a, b } => {
            let n = val(*a).len();
            let s = g[0] * cast(2.0 / n as f64);
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = buf(nodes, grads, *a) {
                for ((d, x), y) in da.iter_mut().zip(av).zip(bv) {
                    *d += s * (*x - *y);
                }
            }
            if let Some(db) = buf(nodes, grads, *b) {
                for ((d, x), y) in db.iter_mut().zip(av).zip(bv) {
                    *d -= s * (*x - *y);
                }
            }
        }
        Op::KlDiv { log_p, q } => {
            let k = val(*log_p).last_dim();
            let bn = val(*log_p).len() / k;
            let s = g[0] / cast(bn as f64);
            let (lp, qv) = (val(*log_p).data(), val(*q).data());
            if let Some(dl) = buf(nodes, grads, *log_p) {
                for ((d, &l), &qq) in dl.iter_mut().zip(lp).zip(qv) {
                    let p = l.exp();
                    if p > T::zero() {
                        *d += s * p * (l - qq.max(T::min_positive_value()).ln() + T::one());
                    }
                }
            }
            if let Some(dq) = buf(nodes, grads, *q) {
                for ((d, &l), &qq) in dq.iter_mut().zip(lp).zip(qv) {
                    *d -= s * l.exp() / qq;
                }
            }
        }
        Op::MaskedTokenMse { t, target, mask } => {
            let c = val(*t).last_dim();
            let mv = val(*mask).data();
            let total: T = mv.iter().copied().sum();
            let s = g[0] * cast::<T>(2.0 / c as f64) / total;
            let (tv, pv) = (val(*t).data(), val(*target).data());
            if let Some(dt) = buf(nodes, grads, *t) {
                for (r, &m) in mv.iter().enumerate() {
                    for j in 0..c {
                        dt[r * c + j] += s * m * (tv[r * c + j] - pv[r * c + j]);
                    }
                }
            }
            if let Some(dp) = buf(nodes, grads, *target) {
                for (r, &m) in mv.iter().enumerate() {
                    for j in 0..c {
                        dp[r * c + j] -= s * m * (tv[r * c + j] - pv[r * c + j]);
                    }
                }
            }
        }
        Op::DepthwiseConv { x, w, b, k } => {
            ops::depthwise_conv_backward(nodes, grads, g, *x, *w, *b, *k);
        }
        Op::AvgPool { x, k } => {
            let xs = val(*x).shape();
            let (bn, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
            let (oh, ow) = (h / k, w / k);
            let inv: T = cast(1.0 / (k * k) as f64);
            if let Some(dx) = buf(nodes, grads, *x) {
                for b in 0..bn {
                    for y in 0..h {
                        for xx in 0..w {
                            let o = ((b * oh + y / k) * ow + xx / k) * c;
                            let d = ((b * h + y) * w + xx) * c;
                            for j in 0..c {
                                dx[d + j] += g[o + j] * inv;
                            }
                        }
                    }
                }
            }
        }
        Op::StraightThrough { soft } => acc(nodes, grads, *soft, g),
    }
    Ok(())
}
