//! Forward kernels for every recorded operation.

use super::{buf, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::macs;
use crate::parallel;
use crate::tensor::{cast, gemm_nn, gemm_nt, Float, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Float>(x: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(GELU_A);
    let half: T = cast(0.5);
    half * x * (T::one() + tanh_exp(c * (x + a * x * x * x)))
}

// One exp instead of libm tanh, which dominated MLP time. Saturates to +-1.
#[inline]
fn tanh_exp<T: Float>(u: T) -> T {
    let two: T = cast(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

#[inline]
pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let c: T = cast(GELU_C);
    let a: T = cast(GELU_A);
    let half: T = cast(0.5);
    let three: T = cast(3.0);
    let t = tanh_exp(c * (x + a * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_data<T: Copy>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if rank == 0 || data.is_empty() {
        return (data.to_vec(), out_shape);
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    let outer = data.len() / inner;
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..outer {
        let base: usize = (0..last).map(|d| idx[d] * strides[d]).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn same_shape(op: &'static str, a: &Tensor<impl Float>, b: &Tensor<impl Float>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<T: Float> Graph<T> {
    fn unary<F>(&self, x: Var, f: F) -> Tensor<T>
    where
        F: FnOnce(&Tensor<T>) -> Tensor<T>,
    {
        f(&self.nodes.borrow()[x.0].value)
    }

    fn binary<R, F>(&self, a: Var, b: Var, f: F) -> R
    where
        F: FnOnce(&Tensor<T>, &Tensor<T>) -> R,
    {
        let nodes = self.nodes.borrow();
        f(&nodes[a.0].value, &nodes[b.0].value)
    }

    /// `[M, K] x [K, P]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |av, bv| {
            if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
                return Err(Error::shape("matmul", av.shape(), bv.shape()));
            }
            let (m, k, p) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut out = vec![T::zero(); m * p];
            gemm_nn(m, k, p, av.data(), bv.data(), &mut out);
            macs::add((m * k * p) as u64);
            Tensor::new(vec![m, p], out)
        })?;
        Ok(self.push(out, Op::MatMul { a, b }, &[a, b]))
    }

    /// Batched product: `[B, M, K] x [B, K, P]`, or `[B, M, K] x [B, P, K]^T`
    /// when `trans_b` is set.
    pub fn bmm(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let out = self.binary(a, b, |av, bv| {
            let (ash, bsh) = (av.shape(), bv.shape());
            if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] {
                return Err(Error::shape("bmm", ash, bsh));
            }
            let (bn, m, k) = (ash[0], ash[1], ash[2]);
            let (kb, p) = if trans_b { (bsh[2], bsh[1]) } else { (bsh[1], bsh[2]) };
            if kb != k {
                return Err(Error::shape("bmm", ash, bsh));
            }
            let mut out = vec![T::zero(); bn * m * p];
            let (ad, bd) = (av.data(), bv.data());
            parallel::for_each_chunk(&mut out, m * p, |i, o| {
                let ab = &ad[i * m * k..(i + 1) * m * k];
                let bb = &bd[i * k * p..(i + 1) * k * p];
                if trans_b {
                    gemm_nt(m, k, p, ab, bb, o, false);
                } else {
                    gemm_nn(m, k, p, ab, bb, o);
                }
            });
            macs::add((bn * m * k * p) as u64);
            Tensor::new(vec![bn, m, p], out)
        })?;
        Ok(self.push(out, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// `x[..., K] * w[K, P] + bias[P]`, applied to every row of `x`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            if wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.shape()[0] {
                return Err(Error::shape("linear", xv.shape(), wv.shape()));
            }
            let (k, p) = (wv.shape()[0], wv.shape()[1]);
            let r = xv.len() / k;
            let mut out = vec![T::zero(); r * p];
            gemm_nn(r, k, p, xv.data(), wv.data(), &mut out);
            if let Some(b) = bias {
                let bv = &nodes[b.0].value;
                if bv.shape() != [p] {
                    return Err(Error::shape("linear", wv.shape(), bv.shape()));
                }
                for row in out.chunks_mut(p) {
                    for (o, bb) in row.iter_mut().zip(bv.data()) {
                        *o += *bb;
                    }
                }
            }
            macs::add((r * k * p) as u64);
            let mut shape = xv.shape().to_vec();
            *shape.last_mut().unwrap() = p;
            Tensor::new(shape, out)?
        };
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(out, Op::Linear { x, w, b: bias }, &parents))
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.binary(a, b, |av, bv| {
            same_shape(op, av, bv)?;
            let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
            Tensor::new(av.shape().to_vec(), data)
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        let out = self.unary(x, |xv| {
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| *v * c).collect()).unwrap()
        });
        self.push(out, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        let out = self.unary(x, |xv| {
            Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| *v + c).collect()).unwrap()
        });
        self.push(out, Op::AddScalar { x }, &[x])
    }

    /// `1 - x`.
    pub fn one_minus(&self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    /// Scales every last-axis row of `x[..., C]` by the matching entry of `m[...]`.
    pub fn mul_rows(&self, x: Var, m: Var) -> Result<Var> {
        let out = self.binary(x, m, |xv, mv| {
            if xv.rank() == 0 || xv.shape()[..xv.rank() - 1] != *mv.shape() {
                return Err(Error::shape("mul_rows", xv.shape(), mv.shape()));
            }
            let c = xv.last_dim();
            let mut data = xv.data().to_vec();
            for (row, s) in data.chunks_mut(c).zip(mv.data()) {
                for v in row.iter_mut() {
                    *v *= *s;
                }
            }
            Tensor::new(xv.shape().to_vec(), data)
        })?;
        Ok(self.push(out, Op::MulRows { x, m }, &[x, m]))
    }

    pub fn gelu(&self, x: Var) -> Var {
        let out = self.unary(x, |xv| {
            let mut data = xv.data().to_vec();
            parallel::for_each_chunk(&mut data, 4096, |_, c| {
                for v in c.iter_mut() {
                    *v = gelu(*v);
                }
            });
            Tensor::new(xv.shape().to_vec(), data).unwrap()
        });
        self.push(out, Op::Gelu { x }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let out = self.unary(x, |xv| {
            let c = xv.last_dim();
            let mut data = xv.data().to_vec();
            parallel::for_each_chunk(&mut data, c, |_, row| softmax_row(row));
            Tensor::new(xv.shape().to_vec(), data).unwrap()
        });
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&self, x: Var) -> Var {
        let out = self.unary(x, |xv| {
            let c = xv.last_dim();
            let mut data = xv.data().to_vec();
            parallel::for_each_chunk(&mut data, c, |_, row| {
                let lse = log_sum_exp(row);
                for v in row.iter_mut() {
                    *v -= lse;
                }
            });
            Tensor::new(xv.shape().to_vec(), data).unwrap()
        });
        self.push(out, Op::LogSoftmax { x }, &[x])
    }

    /// Attention normalisation under a keep mask.
    ///
    /// `scores` is `[B, H, N, N]`, `keep` is `[B, N]` with entries in `[0, 1]`.
    /// Entry `(i, j)` is weighted by `G_ij = keep_j` for `i != j` and `1` on the
    /// diagonal, then renormalised per row:
    /// `A_ij = G_ij exp(P_ij) / sum_k G_ik exp(P_ik)`.
    pub fn masked_softmax(&self, scores: Var, keep: Var) -> Result<Var> {
        let (out, ratio) = self.binary(scores, keep, |sv, kv| {
            let sh = sv.shape();
            if sh.len() != 4 || sh[2] != sh[3] || kv.shape() != [sh[0], sh[3]] {
                return Err(Error::shape("masked_softmax", sh, kv.shape()));
            }
            let (h, n) = (sh[1], sh[2]);
            let kd = kv.data();
            let sd = sv.data();
            let mut a = vec![T::zero(); sd.len()];
            let mut ratio = vec![T::zero(); sd.len()];
            parallel::for_each_chunk_pair(&mut a, n, &mut ratio, n, |r, arow, rrow| {
                let i = r % n;
                let b = r / (h * n);
                let s = &sd[r * n..(r + 1) * n];
                let gk = &kd[b * n..(b + 1) * n];
                let gate = |j: usize| if j == i { T::one() } else { gk[j] };
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    if gate(j) > T::zero() && s[j] > mx {
                        mx = s[j];
                    }
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (s[j] - mx).exp();
                    rrow[j] = e;
                    total += e * gate(j);
                }
                for j in 0..n {
                    rrow[j] /= total;
                    arow[j] = rrow[j] * gate(j);
                }
            });
            Ok((Tensor::new(sh.to_vec(), a)?, ratio))
        })?;
        Ok(self.push(
            out,
            Op::MaskedSoftmax {
                scores,
                keep,
                ratio,
            },
            &[scores, keep],
        ))
    }

    /// Layer normalisation over the last axis (eps = 1e-5).
    pub fn layernorm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, gv, bv) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let c = xv.last_dim();
            if gv.shape() != [c] || bv.shape() != [c] {
                return Err(Error::shape("layernorm", xv.shape(), gv.shape()));
            }
            let rows = xv.len() / c;
            let mut xhat = xv.data().to_vec();
            let mut rstd = vec![T::zero(); rows];
            let inv_c: T = cast(1.0 / c as f64);
            let eps: T = cast(LN_EPS);
            parallel::for_each_chunk_pair(&mut xhat, c, &mut rstd, 1, |_, row, rs| {
                let mean = row.iter().copied().sum::<T>() * inv_c;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_c;
                let r = T::one() / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * r;
                }
                rs[0] = r;
            });
            let (gd, bd) = (gv.data(), bv.data());
            let mut y = xhat.clone();
            parallel::for_each_chunk(&mut y, c, |_, row| {
                for j in 0..c {
                    row[j] = row[j] * gd[j] + bd[j];
                }
            });
            (Tensor::new(xv.shape().to_vec(), y)?, xhat, rstd)
        };
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.unary_res(x, |xv| xv.clone().reshape(shape));
        Ok(self.push(out?, Op::Reshape { x }, &[x]))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.unary_res(x, |xv| {
            let rank = xv.rank();
            let mut seen = vec![false; rank];
            if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
            }
            let (data, shape) = permute_data(xv.data(), xv.shape(), perm);
            Tensor::new(shape, data)
        })?;
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    fn unary_res<F>(&self, x: Var, f: F) -> Result<Tensor<T>>
    where
        F: FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    {
        f(&self.nodes.borrow()[x.0].value)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.unary_res(x, |xv| {
            let xs = xv.shape();
            if axis >= xs.len() {
                return Err(Error::invalid("narrow", format!("axis {axis} out of range for {xs:?}")));
            }
            if start + len > xs[axis] {
                return Err(Error::IndexOutOfRange {
                    op: "narrow",
                    index: start + len,
                    len: xs[axis],
                });
            }
            let outer: usize = xs[..axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let full = xs[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                data.extend_from_slice(&xv.data()[(o * full + start) * inner..(o * full + start + len) * inner]);
            }
            let mut shape = xs.to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)
        })?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let first = inputs
                .first()
                .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
            let fs = nodes[first.0].value.shape().to_vec();
            if axis >= fs.len() {
                return Err(Error::invalid("concat", format!("axis {axis} out of range for {fs:?}")));
            }
            let mut total = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                if s.len() != fs.len()
                    || s.iter().zip(&fs).enumerate().any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(Error::shape("concat", &fs, s));
                }
                total += s[axis];
            }
            let outer: usize = fs[..axis].iter().product();
            let inner: usize = fs[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let len = t.shape()[axis];
                    data.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = fs;
            shape[axis] = total;
            Tensor::new(shape, data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Selects rows of `x` viewed as `[rows, C]`; the result is `[idx.len(), C]`.
    pub fn gather_rows(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = self.unary_res(x, |xv| {
            let c = xv.last_dim();
            let rows = xv.len() / c.max(1);
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                if i >= rows {
                    return Err(Error::IndexOutOfRange {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
                data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
            }
            Tensor::new(vec![idx.len(), c], data)
        })?;
        Ok(self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Copy of `base` (viewed as rows) with rows `idx` replaced by `values`.
    /// Indices must be distinct.
    pub fn scatter_rows(&self, base: Var, idx: &[usize], values: Var) -> Result<Var> {
        let out = self.binary(base, values, |bv, vv| {
            let c = bv.last_dim();
            let rows = bv.len() / c.max(1);
            if vv.last_dim() != c || vv.len() != idx.len() * c {
                return Err(Error::shape("scatter_rows", bv.shape(), vv.shape()));
            }
            let mut seen = vec![false; rows];
            let mut data = bv.data().to_vec();
            for (r, &i) in idx.iter().enumerate() {
                if i >= rows {
                    return Err(Error::IndexOutOfRange {
                        op: "scatter_rows",
                        index: i,
                        len: rows,
                    });
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid("scatter_rows", format!("duplicate index {i}")));
                }
                data[i * c..(i + 1) * c].copy_from_slice(&vv.data()[r * c..(r + 1) * c]);
            }
            Tensor::new(bv.shape().to_vec(), data)
        })?;
        Ok(self.push(
            out,
            Op::ScatterRows {
                base,
                values,
                idx: idx.to_vec(),
            },
            &[base, values],
        ))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = self.unary(x, |xv| Tensor::scalar(xv.data().iter().copied().sum()));
        self.push(out, Op::Sum { x }, &[x])
    }

    pub fn mean(&self, x: Var) -> Var {
        let out = self.unary(x, |xv| {
            let n: T = cast(xv.len().max(1) as f64);
            Tensor::scalar(xv.data().iter().copied().sum::<T>() / n)
        });
        self.push(out, Op::Mean { x }, &[x])
    }

    /// Mean over the last axis: `[..., C] -> [...]`.
    pub fn mean_last(&self, x: Var) -> Var {
        let out = self.unary(x, |xv| {
            let c = xv.last_dim();
            let inv: T = cast(1.0 / c as f64);
            let data = xv.data().chunks(c).map(|r| r.iter().copied().sum::<T>() * inv).collect();
            let shape = xv.shape()[..xv.rank().saturating_sub(1)].to_vec();
            Tensor::new(shape, data).unwrap()
        });
        self.push(out, Op::MeanLast { x }, &[x])
    }

    /// Weighted mean over tokens: `u[B, N, C]`, `d[B, N]` gives
    /// `out[b] = sum_i d_bi u_bi / sum_i d_bi`.
    pub fn masked_mean_rows(&self, u: Var, d: Var) -> Result<Var> {
        let out = self.binary(u, d, |uv, dv| {
            let us = uv.shape();
            if us.len() != 3 || dv.shape() != [us[0], us[1]] {
                return Err(Error::shape("masked_mean_rows", us, dv.shape()));
            }
            let (bn, n, c) = (us[0], us[1], us[2]);
            let mut out = vec![T::zero(); bn * c];
            for b in 0..bn {
                let w = &dv.data()[b * n..(b + 1) * n];
                let s: T = w.iter().copied().sum();
                if s <= T::zero() {
                    return Err(Error::EmptyMask);
                }
                let o = &mut out[b * c..(b + 1) * c];
                for (i, &wi) in w.iter().enumerate() {
                    if wi != T::zero() {
                        let row = &uv.data()[(b * n + i) * c..(b * n + i + 1) * c];
                        for (oo, v) in o.iter_mut().zip(row) {
                            *oo += wi * *v;
                        }
                    }
                }
                for oo in o.iter_mut() {
                    *oo /= s;
                }
            }
            Tensor::new(vec![bn, c], out)
        })?;
        Ok(self.push(out, Op::MaskedMeanRows { u, d }, &[u, d]))
    }

    /// Inserts a new axis of size `n` at position `axis` by repetition.
    pub fn broadcast_axis(&self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let out = self.unary_res(x, |xv| {
            let xs = xv.shape();
            if axis > xs.len() {
                return Err(Error::invalid("broadcast_axis", format!("axis {axis} out of range for {xs:?}")));
            }
            let outer: usize = xs[..axis].iter().product();
            let inner: usize = xs[axis..].iter().product();
            let mut data = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                let src = &xv.data()[o * inner..(o + 1) * inner];
                for _ in 0..n {
                    data.extend_from_slice(src);
                }
            }
            let mut shape = xs.to_vec();
            shape.insert(axis, n);
            Tensor::new(shape, data)
        })?;
        Ok(self.push(out, Op::BroadcastAxis { x, axis }, &[x]))
    }

    /// Mean cross-entropy of `logits[B, K]` against integer labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (out, probs) = self.unary_res2(logits, |lv| {
            if lv.rank() != 2 || lv.shape()[0] != labels.len() {
                return Err(Error::shape("cross_entropy", lv.shape(), &[labels.len()]));
            }
            let k = lv.shape()[1];
            let mut probs = lv.data().to_vec();
            let mut loss = T::zero();
            for (b, row) in probs.chunks_mut(k).enumerate() {
                let y = labels[b];
                if y >= k {
                    return Err(Error::IndexOutOfRange {
                        op: "cross_entropy",
                        index: y,
                        len: k,
                    });
                }
                let lse = log_sum_exp(row);
                loss += lse - row[y];
                for v in row.iter_mut() {
                    *v = (*v - lse).exp();
                }
            }
            loss /= cast(labels.len().max(1) as f64);
            Ok((Tensor::scalar(loss), probs))
        })?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    fn unary_res2<R, F>(&self, x: Var, f: F) -> Result<R>
    where
        F: FnOnce(&Tensor<T>) -> Result<R>,
    {
        f(&self.nodes.borrow()[x.0].value)
    }

    /// Mean squared error over all elements.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |av, bv| {
            same_shape("mse", av, bv)?;
            let n: T = cast(av.len().max(1) as f64);
            let s: T = av.data().iter().zip(bv.data()).map(|(x, y)| (*x - *y) * (*x - *y)).sum();
            Ok::<_, Error>(Tensor::scalar(s / n))
        })?;
        Ok(self.push(out, Op::Mse { a, b }, &[a, b]))
    }

    /// `KL(p || q)` with `p = exp(log_p)`, summed over the last axis and
    /// averaged over rows. Terms with `p = 0` contribute nothing.
    pub fn kl_div(&self, log_p: Var, q: Var) -> Result<Var> {
        let out = self.binary(log_p, q, |lv, qv| {
            same_shape("kl_div", lv, qv)?;
            let k = lv.last_dim();
            let rows: T = cast((lv.len() / k.max(1)).max(1) as f64);
            let mut s = T::zero();
            for (&l, &qq) in lv.data().iter().zip(qv.data()) {
                let p = l.exp();
                if p > T::zero() {
                    s += p * (l - qq.max(T::min_positive_value()).ln());
                }
            }
            Ok::<_, Error>(Tensor::scalar(s / rows))
        })?;
        Ok(self.push(out, Op::KlDiv { log_p, q }, &[log_p, q]))
    }

    /// Squared error between token features, averaged over channels and then
    /// over the tokens selected by `mask`. `t`, `target` are `[B, N, C]`,
    /// `mask` is `[B, N]` and is treated as constant.
    pub fn masked_token_mse(&self, t: Var, target: Var, mask: Var) -> Result<Var> {
        let out = {
            let nodes = self.nodes.borrow();
            let (tv, pv, mv) = (&nodes[t.0].value, &nodes[target.0].value, &nodes[mask.0].value);
            same_shape("masked_token_mse", tv, pv)?;
            if tv.rank() != 3 || mv.shape() != &tv.shape()[..2] {
                return Err(Error::shape("masked_token_mse", tv.shape(), mv.shape()));
            }
            let c = tv.last_dim();
            let total: T = mv.data().iter().copied().sum();
            if total <= T::zero() {
                return Err(Error::EmptyMask);
            }
            let mut s = T::zero();
            for (r, &m) in mv.data().iter().enumerate() {
                if m != T::zero() {
                    let e: T = (0..c)
                        .map(|j| {
                            let d = tv.data()[r * c + j] - pv.data()[r * c + j];
                            d * d
                        })
                        .sum();
                    s += m * e;
                }
            }
            Tensor::scalar(s / (total * cast(c as f64)))
        };
        Ok(self.push(out, Op::MaskedTokenMse { t, target, mask }, &[t, target]))
    }

    /// Depthwise 2-D convolution with zero "same" padding.
    ///
    /// `x` is `[B, H, W, C]`, `w` is `[k, k, C]`, `b` is `[C]`, `k` odd.
    pub fn depthwise_conv2d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (out, k) = {
            let nodes = self.nodes.borrow();
            let (xv, wv, bv) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let xs = xv.shape();
            let ws = wv.shape();
            if xs.len() != 4 || ws.len() != 3 || ws[0] != ws[1] || ws[2] != xs[3] || ws[0] % 2 == 0 {
                return Err(Error::shape("depthwise_conv2d", xs, ws));
            }
            if bv.shape() != [xs[3]] {
                return Err(Error::shape("depthwise_conv2d", xs, bv.shape()));
            }
            let (bn, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
            let k = ws[0];
            let (xp, hp, wp) = pad_nhwc(xv.data(), bn, h, wd, c, k / 2);
            let wdat = wv.data();
            let bdat = bv.data();
            let mut out = vec![T::zero(); bn * h * wd * c];
            parallel::for_each_chunk(&mut out, wd * c, |row, o| {
                let bi = row / h;
                let y = row % h;
                for xx in 0..wd {
                    let oc = &mut o[xx * c..(xx + 1) * c];
                    oc.copy_from_slice(bdat);
                    for dy in 0..k {
                        for dx in 0..k {
                            let src = ((bi * hp + y + dy) * wp + xx + dx) * c;
                            let wk = &wdat[(dy * k + dx) * c..(dy * k + dx + 1) * c];
                            let xr = &xp[src..src + c];
                            for j in 0..c {
                                oc[j] += xr[j] * wk[j];
                            }
                        }
                    }
                }
            });
            macs::add((bn * h * wd * c * k * k) as u64);
            (Tensor::new(xs.to_vec(), out)?, k)
        };
        Ok(self.push(out, Op::DepthwiseConv { x, w, b, k }, &[x, w, b]))
    }

    /// Non-overlapping `k x k` average pooling of `[B, H, W, C]`.
    pub fn avg_pool_2d(&self, x: Var, k: usize) -> Result<Var> {
        let out = self.unary_res(x, |xv| {
            let xs = xv.shape();
            if xs.len() != 4 || k == 0 || xs[1] % k != 0 || xs[2] % k != 0 {
                return Err(Error::invalid("avg_pool_2d", format!("cannot pool {xs:?} by {k}")));
            }
            let (bn, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
            let (oh, ow) = (h / k, w / k);
            let inv: T = cast(1.0 / (k * k) as f64);
            let mut out = vec![T::zero(); bn * oh * ow * c];
            for b in 0..bn {
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((b * oh + y / k) * ow + xx / k) * c;
                        let s = ((b * h + y) * w + xx) * c;
                        for j in 0..c {
                            out[o + j] += xv.data()[s + j] * inv;
                        }
                    }
                }
            }
            Tensor::new(vec![bn, oh, ow, c], out)
        })?;
        Ok(self.push(out, Op::AvgPool { x, k }, &[x]))
    }

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        let ok = self.with_value(soft, |s| s.shape() == hard.shape());
        if !ok {
            return Err(Error::shape("straight_through", &self.shape(soft), hard.shape()));
        }
        Ok(self.push(hard, Op::StraightThrough { soft }, &[soft]))
    }
}

fn softmax_row<T: Float>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln()
}

fn pad_nhwc<T: Float>(
    x: &[T],
    bn: usize,
    h: usize,
    w: usize,
    c: usize,
    p: usize,
) -> (Vec<T>, usize, usize) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![T::zero(); bn * hp * wp * c];
    for b in 0..bn {
        for y in 0..h {
            let src = ((b * h + y) * w) * c;
            let dst = ((b * hp + y + p) * wp + p) * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
    }
    (out, hp, wp)
}

pub(super) fn depthwise_conv_backward<T: Float>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    x: Var,
    w: Var,
    b: Var,
    k: usize,
) {
    let xs = nodes[x.0].value.shape();
    let (bn, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
    let p = k / 2;
    let (hp, wp) = (h + 2 * p, wd + 2 * p);
    let wdat = nodes[w.0].value.data();

    if let Some(db) = buf(nodes, grads, b) {
        for row in g.chunks(c) {
            for (d, s) in db.iter_mut().zip(row) {
                *d += *s;
            }
        }
    }
    if nodes[w.0].requires_grad {
        let (xp, _, _) = pad_nhwc(nodes[x.0].value.data(), bn, h, wd, c, p);
        // Per-image partial sums, reduced in a fixed order.
        let partials = parallel::map_range(bn, bn * h * wd * c * k * k, |bi| {
            let mut dw = vec![T::zero(); k * k * c];
            for y in 0..h {
                for xx in 0..wd {
                    let gr = &g[((bi * h + y) * wd + xx) * c..((bi * h + y) * wd + xx + 1) * c];
                    for dy in 0..k {
                        for dx in 0..k {
                            let src = ((bi * hp + y + dy) * wp + xx + dx) * c;
                            let dwk = &mut dw[(dy * k + dx) * c..(dy * k + dx + 1) * c];
                            for j in 0..c {
                                dwk[j] += gr[j] * xp[src + j];
                            }
                        }
                    }
                }
            }
            dw
        });
        let dw = buf(nodes, grads, w).expect("requires grad");
        for part in partials {
            for (d, s) in dw.iter_mut().zip(&part) {
                *d += *s;
            }
        }
    }
    if let Some(dx) = buf(nodes, grads, x) {
        parallel::for_each_chunk(dx, h * wd * c, |bi, dxb| {
            let mut dxp = vec![T::zero(); hp * wp * c];
            for y in 0..h {
                for xx in 0..wd {
                    let gr = &g[((bi * h + y) * wd + xx) * c..((bi * h + y) * wd + xx + 1) * c];
                    for dy in 0..k {
                        for dx in 0..k {
                            let dst = ((y + dy) * wp + xx + dx) * c;
                            let wk = &wdat[(dy * k + dx) * c..(dy * k + dx + 1) * c];
                            for j in 0..c {
                                dxp[dst + j] += gr[j] * wk[j];
                            }
                        }
                    }
                }
            }
            for y in 0..h {
                let src = ((y + p) * wp + p) * c;
                let row = &mut dxb[y * wd * c..(y + 1) * wd * c];
                for (d, s) in row.iter_mut().zip(&dxp[src..src + wd * c]) {
                    *d += *s;
                }
            }
        });
    }
}
