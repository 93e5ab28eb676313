//! Multi-head self-attention with optional token masking.
//!
//! With a keep mask `D` of shape `[B, N]`, the attention graph is
//! `G_ij = D_j` for `i != j` and `G_ii = 1`, and the attention matrix is
//! renormalised over `G`. Pruned tokens therefore neither contribute to nor
//! receive information from kept ones, while batch shapes stay fixed.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Group, Linear, ParamStore};
use crate::tensor::{cast, Float, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output projection plus the attention probabilities `[B, heads, N, N]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub out: Var,
    pub probs: Var,
}

impl Attention {
    pub fn new<T: Float>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        group: Group,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            qkv: Linear::new(ps, rng, &format!("{name}.qkv"), dim, 3 * dim, group),
            proj: Linear::new(ps, rng, &format!("{name}.proj"), dim, dim, group),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// `x` is `[B, N, C]`. Without `keep` this is standard attention.
    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        keep: Option<Var>,
    ) -> Result<AttentionOutput> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape("attention", &shape, &[self.dim]));
        }
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let (h, d) = (self.heads, self.head_dim());
        if let Some(k) = keep {
            validate_keep(g, k, b, n)?;
        }

        let qkv = self.qkv.forward(g, p, x)?;
        let qkv = g.reshape(qkv, &[b, n, 3, h, d])?;
        let qkv = g.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = g.reshape(qkv, &[3, b * h, n, d])?;
        let q = g.reshape(g.narrow(qkv, 0, 0, 1)?, &[b * h, n, d])?;
        let k = g.reshape(g.narrow(qkv, 0, 1, 1)?, &[b * h, n, d])?;
        let v = g.reshape(g.narrow(qkv, 0, 2, 1)?, &[b * h, n, d])?;

        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, cast(1.0 / (d as f64).sqrt()));
        let scores = g.reshape(scores, &[b, h, n, n])?;
        let probs = match keep {
            Some(k) => g.masked_softmax(scores, k)?,
            None => g.softmax(scores),
        };
        let a = g.reshape(probs, &[b * h, n, n])?;
        let y = g.bmm(a, v, false)?;
        let y = g.reshape(y, &[b, h, n, d])?;
        let y = g.permute(y, &[0, 2, 1, 3])?;
        let y = g.reshape(y, &[b, n, c])?;
        let out = self.proj.forward(g, p, y)?;
        Ok(AttentionOutput { out, probs })
    }
}

fn validate_keep<T: Float>(g: &Graph<T>, keep: Var, b: usize, n: usize) -> Result<()> {
    g.with_value(keep, |k| {
        if k.shape() != [b, n] {
            return Err(Error::shape("masked_attention", &[b, n], k.shape()));
        }
        for row in k.data().chunks(n) {
            if row.iter().all(|v| *v == T::zero()) {
                return Err(Error::EmptyMask);
            }
            if row[0] != T::one() {
                return Err(Error::invalid(
                    "masked_attention",
                    "the class token (index 0) must be kept",
                ));
            }
        }
        Ok(())
    })
}

/// Attention of the class token to every token, averaged over heads:
/// `[B, H, N, N] -> [B, N]`.
pub fn class_attention<T: Float>(probs: &Tensor<T>) -> Tensor<T> {
    let s = probs.shape();
    let (b, h, n) = (s[0], s[1], s[2]);
    let inv: T = cast(1.0 / h as f64);
    let mut out = vec![T::zero(); b * n];
    for bi in 0..b {
        for hh in 0..h {
            let row = &probs.data()[((bi * h + hh) * n) * n..((bi * h + hh) * n + 1) * n];
            for j in 0..n {
                out[bi * n + j] += row[j] * inv;
            }
        }
    }
    Tensor::new(vec![b, n], out).expect("shape")
}

/// Intermediate quantities of one masked attention evaluation, per head.
#[derive(Debug, Clone)]
pub struct AttentionContext<T> {
    pub heads: usize,
    pub head_dim: usize,
    /// `[H, N, d]` each.
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Scaled scores before normalisation, `[H, N, N]`.
    pub p: Tensor<T>,
    /// Attention graph, `[N, N]`.
    pub g: Tensor<T>,
    /// Masked attention matrix, `[H, N, N]`.
    pub a: Tensor<T>,
}

/// Evaluates attention for a single sample `x: [N, C]` and returns every
/// intermediate.
pub fn attention_context<T: Float>(
    attn: &Attention,
    ps: &ParamStore<T>,
    x: &Tensor<T>,
    keep: &Tensor<T>,
) -> Result<AttentionContext<T>> {
    let n = x.shape()[0];
    let (h, d) = (attn.heads, attn.head_dim());
    let g = Graph::new();
    let p = ps.bind(&g, |_| false);
    let xv = g.constant(x.clone().reshape(&[1, n, attn.dim])?);
    let kv = g.constant(keep.clone().reshape(&[1, n])?);
    let out = attn.forward(&g, &p, xv, Some(kv))?;

    let qkv = g.value(attn.qkv.forward(&g, &p, xv)?);
    let mut q = vec![T::zero(); h * n * d];
    let mut k = q.clone();
    let mut v = q.clone();
    for i in 0..n {
        for hh in 0..h {
            for j in 0..d {
                let base = i * 3 * attn.dim + hh * d + j;
                q[(hh * n + i) * d + j] = qkv.data()[base];
                k[(hh * n + i) * d + j] = qkv.data()[base + attn.dim];
                v[(hh * n + i) * d + j] = qkv.data()[base + 2 * attn.dim];
            }
        }
    }
    let scale: T = cast(1.0 / (d as f64).sqrt());
    let mut pm = vec![T::zero(); h * n * n];
    for hh in 0..h {
        for i in 0..n {
            for j in 0..n {
                let mut s = T::zero();
                for t in 0..d {
                    s += q[(hh * n + i) * d + t] * k[(hh * n + j) * d + t];
                }
                pm[(hh * n + i) * n + j] = s * scale;
            }
        }
    }
    let gm = Tensor::from_fn(&[n, n], |ij| {
        let (i, j) = (ij / n, ij % n);
        if i == j {
            T::one()
        } else {
            keep.data()[j]
        }
    });
    let a = g.value(out.probs).reshape(&[h, n, n])?;
    Ok(AttentionContext {
        heads: h,
        head_dim: d,
        q: Tensor::new(vec![h, n, d], q)?,
        k: Tensor::new(vec![h, n, d], k)?,
        v: Tensor::new(vec![h, n, d], v)?,
        p: Tensor::new(vec![h, n, n], pm)?,
        g: gm,
        a,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize, c: usize, heads: usize, seed: u64) -> (ParamStore<f64>, Attention, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let attn = Attention::new(&mut ps, &mut rng, "a", c, heads, Group::Backbone).unwrap();
        let x = Tensor::from_fn(&[1, n, c], |_| rng.gen_range(-1.0..1.0));
        (ps, attn, x)
    }

    fn run(ps: &ParamStore<f64>, attn: &Attention, x: &Tensor<f64>, keep: Option<&[f64]>) -> Tensor<f64> {
        let g = Graph::new();
        let p = ps.bind(&g, |_| false);
        let xv = g.constant(x.clone());
        let n = x.shape()[1];
        let k = keep.map(|k| g.constant(Tensor::from_f64(&[1, n], k).unwrap()));
        g.value(attn.forward(&g, &p, xv, k).unwrap().out)
    }

    #[test]
    fn all_ones_mask_equals_dense() {
        let (ps, attn, x) = setup(7, 8, 2, 1);
        let dense = run(&ps, &attn, &x, None);
        let masked = run(&ps, &attn, &x, Some(&[1.0; 7]));
        assert!(dense.max_abs_diff(&masked) < 1e-12);
    }

    #[test]
    fn single_token_output_is_projected_value() {
        let (ps, attn, x) = setup(1, 4, 1, 2);
        let out = run(&ps, &attn, &x, None);
        let g = Graph::new();
        let p = ps.bind(&g, |_| false);
        let qkv = g.value(attn.qkv.forward(&g, &p, g.constant(x.clone())).unwrap());
        let v = g.constant(Tensor::new(vec![1, 4], qkv.data()[8..12].to_vec()).unwrap());
        let expect = g.value(attn.proj.forward(&g, &p, v).unwrap());
        assert!(out.reshape(&[1, 4]).unwrap().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn two_token_example_rows() {
        let (ps, attn, x) = setup(2, 4, 1, 3);
        let ctx = attention_context(&attn, &ps, &x.reshape(&[2, 4]).unwrap(), &Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap()).unwrap();
        let a = ctx.a.data();
        assert_eq!(a[0], 1.0);
        assert_eq!(a[1], 0.0);
        let (p10, p11) = (ctx.p.data()[2], ctx.p.data()[3]);
        let z = p10.exp() + p11.exp();
        assert!((a[2] - p10.exp() / z).abs() < 1e-12);
        assert!((a[3] - p11.exp() / z).abs() < 1e-12);
    }

    #[test]
    fn context_invariants_hold() {
        let (ps, attn, x) = setup(6, 8, 2, 4);
        let keep = Tensor::from_f64(&[6], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let ctx = attention_context(&attn, &ps, &x.reshape(&[6, 8]).unwrap(), &keep).unwrap();
        for i in 0..6 {
            assert_eq!(ctx.g.data()[i * 6 + i], 1.0);
        }
        for hh in 0..2 {
            for i in 0..6 {
                let row = &ctx.a.data()[(hh * 6 + i) * 6..(hh * 6 + i + 1) * 6];
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for j in 0..6 {
                    if i != j && keep.data()[j] == 0.0 {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_mask_without_class_token() {
        let (ps, attn, x) = setup(3, 4, 1, 5);
        let g = Graph::new();
        let p = ps.bind(&g, |_| false);
        let xv = g.constant(x);
        let zero = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(attn.forward(&g, &p, xv, Some(zero)), Err(Error::EmptyMask)));
        let no_cls = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 1.0, 1.0]).unwrap());
        assert!(attn.forward(&g, &p, xv, Some(no_cls)).is_err());
    }
}
