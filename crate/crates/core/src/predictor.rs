//! Token scoring, Gumbel sampling and decision-mask bookkeeping.
//!
//! The scorer combines a per-token local embedding with a global embedding
//! pooled over the currently kept tokens, then maps the concatenation to
//! drop/keep probabilities (column 0 = drop, column 1 = keep).

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Group, LayerNorm, Linear, ParamStore};
use crate::tensor::{cast, Float, Tensor};

/// Hidden widths of the scorer for embedding dimension `c`.
pub fn hidden_dims(c: usize) -> (usize, usize) {
    ((c / 2).max(1), (c / 4).max(1))
}

#[derive(Debug, Clone, Copy)]
pub struct Predictor {
    pub local_ln: LayerNorm,
    pub local_fc: Linear,
    pub global_ln: LayerNorm,
    pub global_fc: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub dim: usize,
}

impl Predictor {
    /// The output layer starts at zero so every token begins at `[0.5, 0.5]`.
    pub fn new<T: Float>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        group: Group,
    ) -> Self {
        let (h1, h2) = hidden_dims(dim);
        Self {
            local_ln: LayerNorm::new(ps, &format!("{name}.local_ln"), dim, group),
            local_fc: Linear::new(ps, rng, &format!("{name}.local_fc"), dim, h1, group),
            global_ln: LayerNorm::new(ps, &format!("{name}.global_ln"), dim, group),
            global_fc: Linear::new(ps, rng, &format!("{name}.global_fc"), dim, h1, group),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), 2 * h1, h1, group),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), h1, h2, group),
            fc3: Linear::zeros(ps, &format!("{name}.fc3"), h2, 2, group),
            dim,
        }
    }

    /// Log-probabilities `[B, N, 2]` for tokens `x: [B, N, C]` under the
    /// current keep state `d_hat: [B, N]`.
    pub fn log_probs<T: Float>(&self, g: &Graph<T>, p: &Bound, x: Var, d_hat: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.dim {
            return Err(Error::shape("predictor", &shape, &[self.dim]));
        }
        let n = shape[1];
        let local = self.local_ln.forward(g, p, x)?;
        let local = g.gelu(self.local_fc.forward(g, p, local)?);
        let glob = self.global_ln.forward(g, p, x)?;
        let glob = g.gelu(self.global_fc.forward(g, p, glob)?);
        let pooled = aggregate(g, glob, d_hat)?;
        let glob = g.broadcast_axis(pooled, 1, n)?;
        let z = g.concat(&[local, glob], 2)?;
        let z = g.gelu(self.fc1.forward(g, p, z)?);
        let z = g.gelu(self.fc2.forward(g, p, z)?);
        let z = self.fc3.forward(g, p, z)?;
        Ok(g.log_softmax(z))
    }
}

/// Mean of the rows of `u: [B, N, C']` weighted by `d_hat: [B, N]`.
pub fn aggregate<T: Float>(g: &Graph<T>, u: Var, d_hat: Var) -> Result<Var> {
    g.masked_mean_rows(u, d_hat)
}

/// Keep/drop state after one stage.
#[derive(Debug, Clone)]
pub struct DecisionMask<T> {
    /// `[B, N]`, entries in `{0, 1}`.
    pub d_hat: Tensor<T>,
    /// `[B, N, 2]` drop/keep probabilities that produced the decision.
    pub pi: Tensor<T>,
    pub stage_index: usize,
}

/// Standard Gumbel noise of the given shape.
pub fn gumbel_noise<T: Float>(rng: &mut impl Rng, shape: &[usize]) -> Tensor<T> {
    let d = Gumbel::new(0.0, 1.0).expect("unit scale");
    Tensor::from_fn(shape, |_| cast(d.sample(rng)))
}

/// Hard straight-through Gumbel-Softmax decision from `log_pi: [..., 2]`.
///
/// The forward value is 1 where the perturbed keep logit wins; the backward
/// pass differentiates `softmax((log_pi + noise) / tau)[..., 1]`.
pub fn gumbel_sample_with_noise<T: Float>(
    g: &Graph<T>,
    log_pi: Var,
    noise: &Tensor<T>,
    tau: f64,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::invalid("gumbel_sample", format!("temperature {tau} must be positive")));
    }
    let shape = g.shape(log_pi);
    if shape.last() != Some(&2) || noise.shape() != shape.as_slice() {
        return Err(Error::shape("gumbel_sample", &shape, noise.shape()));
    }
    let nz = g.constant(noise.clone());
    let y = g.add(log_pi, nz)?;
    let y = g.scale(y, cast(1.0 / tau));
    let soft = g.softmax(y);
    let axis = shape.len() - 1;
    let keep_soft = g.narrow(soft, axis, 1, 1)?;
    let keep_soft = g.reshape(keep_soft, &shape[..axis])?;
    let hard = g.with_value(y, |yv| {
        let data = yv
            .data()
            .chunks(2)
            .map(|r| if r[1] > r[0] { T::one() } else { T::zero() })
            .collect();
        Tensor::new(shape[..axis].to_vec(), data)
    })?;
    g.straight_through(keep_soft, hard)
}

pub fn gumbel_sample<T: Float>(g: &Graph<T>, log_pi: Var, tau: f64, rng: &mut impl Rng) -> Result<Var> {
    let noise = gumbel_noise(rng, &g.shape(log_pi));
    gumbel_sample_with_noise(g, log_pi, &noise, tau)
}

/// `d_hat * d` with the class token (index 0 on the last axis) forced to 1.
pub fn update_mask<T: Float>(g: &Graph<T>, d_hat: Var, d: Var) -> Result<Var> {
    let shape = g.shape(d_hat);
    if shape.len() != 2 {
        return Err(Error::shape("update_mask", &shape, &g.shape(d)));
    }
    let (b, n) = (shape[0], shape[1]);
    let prod = g.mul(d_hat, d)?;
    if n == 1 {
        return Ok(g.constant(Tensor::ones(&[b, 1])));
    }
    let ones = g.constant(Tensor::ones(&[b, 1]));
    let rest = g.narrow(prod, 1, 1, n - 1)?;
    g.concat(&[ones, rest], 1)
}

/// Indices of the `m` largest values, in descending order of value, ties by
/// lower index first. NaNs rank last.
pub fn topk_select<T: Float>(keep: &[T], m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > keep.len() {
        return Err(Error::invalid(
            "topk_select",
            format!("m = {m} must lie in 1..={}", keep.len()),
        ));
    }
    let mut idx: Vec<usize> = (0..keep.len()).collect();
    let key = |i: usize| if keep[i].is_nan() { T::neg_infinity() } else { keep[i] };
    idx.sort_by(|&a, &b| {
        key(b)
            .partial_cmp(&key(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(m);
    Ok(idx)
}

/// `floor(ratio * n)` with a tolerance so that e.g. `0.7^3 * 1000` gives 343.
pub fn keep_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64) + 1e-9).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aggregate_examples() {
        let g = Graph::<f64>::new();
        let u = g.constant(Tensor::from_f64(&[1, 2, 2], &[2.0, 2.0, 4.0, 4.0]).unwrap());
        let d = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        assert_eq!(g.value(aggregate(&g, u, d).unwrap()).data(), &[2.0, 2.0]);
        let ones = g.constant(Tensor::ones(&[1, 2]));
        assert_eq!(g.value(aggregate(&g, u, ones).unwrap()).data(), &[3.0, 3.0]);
        let zero = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(aggregate(&g, u, zero), Err(Error::EmptyMask)));
    }

    #[test]
    fn zero_weights_give_even_odds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f64>::new();
        let pred = Predictor::new(&mut ps, &mut rng, "p", 8, Group::Predictor);
        let ids: Vec<_> = ps.iter().map(|(id, ..)| id).collect();
        for id in ids {
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let p = ps.bind(&g, |_| false);
        let x = g.constant(Tensor::from_fn(&[2, 5, 8], |i| (i as f64).sin()));
        let d = g.constant(Tensor::ones(&[2, 5]));
        let lp = g.value(pred.log_probs(&g, &p, x, d).unwrap());
        assert!(lp.data().iter().all(|v| (v.exp() - 0.5).abs() < 1e-12));
    }

    #[test]
    fn update_mask_examples() {
        let g = Graph::<f64>::new();
        let t = |v: &[f64]| g.constant(Tensor::from_f64(&[1, v.len()], v).unwrap());
        let out = update_mask(&g, t(&[1.0, 1.0, 1.0]), t(&[1.0, 0.0, 1.0])).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 0.0, 1.0]);
        let out = update_mask(&g, t(&[1.0, 0.0, 1.0]), t(&[1.0, 1.0, 0.0])).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 0.0, 0.0]);
        let out = update_mask(&g, t(&[1.0, 1.0]), t(&[0.0, 1.0])).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 1.0]);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_select(&[0.9, 0.1, 0.5], 2).unwrap(), vec![0, 2]);
        assert_eq!(topk_select(&[0.3; 5], 3).unwrap(), vec![0, 1, 2]);
        assert!(topk_select(&[0.3; 5], 0).is_err());
        assert!(topk_select(&[0.3; 5], 6).is_err());
        let counts: Vec<usize> = (1..=3).map(|s| keep_count(0.7f64.powi(s), 196)).collect();
        assert_eq!(counts, vec![137, 96, 67]);
    }

    #[test]
    fn degenerate_pi_always_keeps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Graph::<f64>::new();
        let lp = g.constant(Tensor::from_f64(&[1, 2], &[f64::NEG_INFINITY, 0.0]).unwrap());
        for _ in 0..100 {
            let d = gumbel_sample(&g, lp, 1.0, &mut rng).unwrap();
            assert_eq!(g.value(d).data(), &[1.0]);
        }
    }
}
