//! Training objective: classification, self-distillation, prediction KL and
//! keep-ratio regularisation.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{cast, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub kl: f64,
    pub distill: f64,
    pub ratio: f64,
}

impl LossWeights {
    pub fn vit() -> Self {
        Self {
            kl: 0.5,
            distill: 0.5,
            ratio: 2.0,
        }
    }

    pub fn hier() -> Self {
        Self {
            ratio: 10.0,
            ..Self::vit()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.kl, self.distill, self.ratio].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::vit()
    }
}

/// Outputs of the frozen dense teacher for one batch.
#[derive(Debug, Clone)]
pub struct TeacherOutputs<T> {
    /// Final features `[B, N, C]`.
    pub features: Tensor<T>,
    /// Class probabilities `[B, K]`.
    pub probs: Tensor<T>,
}

/// Mean cross-entropy.
pub fn loss_cls<T: Float>(g: &Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Squared error over the tokens kept by `mask: [B, N]`, averaged over
/// channels and normalised by the number of kept tokens.
pub fn loss_distill_tokens<T: Float>(g: &Graph<T>, t: Var, t_teacher: Var, mask: Var) -> Result<Var> {
    g.masked_token_mse(t, t_teacher, mask)
}

/// Mean squared error over all feature elements.
pub fn loss_distill_dense<T: Float>(g: &Graph<T>, t: Var, t_teacher: Var) -> Result<Var> {
    g.mse(t, t_teacher)
}

/// `KL(y || y')` between the student's softmax of `logits` and teacher
/// probabilities, averaged over the batch.
pub fn loss_kl<T: Float>(g: &Graph<T>, logits: Var, teacher_probs: Var) -> Result<Var> {
    let lp = g.log_softmax(logits);
    g.kl_div(lp, teacher_probs)
}

/// Mean over batch and stages of `(target_s - mean_i mask_s[b, i])^2`.
///
/// The first `skip` columns of every mask (e.g. a class token) are left out
/// of the realised fraction.
pub fn loss_ratio<T: Float>(g: &Graph<T>, masks: &[Var], targets: &[f64], skip: usize) -> Result<Var> {
    if masks.is_empty() || masks.len() != targets.len() {
        return Err(Error::invalid(
            "loss_ratio",
            format!("{} masks for {} targets", masks.len(), targets.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&m, &r) in masks.iter().zip(targets) {
        let shape = g.shape(m);
        if shape.len() != 2 || shape[1] <= skip {
            return Err(Error::shape("loss_ratio", &shape, &[skip + 1]));
        }
        let m = if skip > 0 { g.narrow(m, 1, skip, shape[1] - skip)? } else { m };
        let frac = g.mean_last(m);
        let diff = g.add_scalar(frac, cast(-r));
        let sq = g.mul(diff, diff)?;
        let term = g.mean(sq);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(g.scale(total.expect("non-empty"), cast(1.0 / masks.len() as f64)))
}

/// Individual loss terms. Disabled terms are `None`.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub cls: Var,
    pub kl: Option<Var>,
    pub distill: Option<Var>,
    pub ratio: Option<Var>,
}

/// `cls + lambda_kl * kl + lambda_distill * distill + lambda_ratio * ratio`.
pub fn loss_total<T: Float>(g: &Graph<T>, parts: &LossParts, w: &LossWeights) -> Result<Var> {
    let mut total = parts.cls;
    for (part, weight) in [(parts.kl, w.kl), (parts.distill, w.distill), (parts.ratio, w.ratio)] {
        if let Some(v) = part {
            let v = g.scale(v, cast(weight));
            total = g.add(total, v)?;
        }
    }
    Ok(total)
}

/// How the student's features are matched to the teacher's.
#[derive(Debug, Clone, Copy)]
pub enum DistillTarget {
    /// Token pipeline: only tokens kept by the last-stage mask `[B, N]`.
    Tokens(Var),
    /// Hierarchical pipeline: every location.
    Dense,
}

/// Loss values of one step, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub kl: f64,
    pub distill: f64,
    pub ratio: f64,
}

/// Assembles the objective. Terms whose weight is zero, or that have no
/// inputs (no teacher, dense schedule), are skipped.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Float>(
    g: &Graph<T>,
    logits: Var,
    features: Var,
    labels: &[usize],
    teacher: Option<&TeacherOutputs<T>>,
    distill: DistillTarget,
    ratio_masks: &[Var],
    targets: &[f64],
    skip: usize,
    w: &LossWeights,
) -> Result<(Var, LossParts)> {
    let cls = loss_cls(g, logits, labels)?;
    let mut parts = LossParts {
        cls,
        kl: None,
        distill: None,
        ratio: None,
    };
    if let Some(t) = teacher {
        if w.kl > 0.0 {
            let q = g.constant(t.probs.clone());
            parts.kl = Some(loss_kl(g, logits, q)?);
        }
        if w.distill > 0.0 {
            let tf = g.constant(t.features.clone());
            parts.distill = Some(match distill {
                DistillTarget::Tokens(mask) => loss_distill_tokens(g, features, tf, mask)?,
                DistillTarget::Dense => loss_distill_dense(g, features, tf)?,
            });
        }
    }
    if w.ratio > 0.0 && !ratio_masks.is_empty() {
        parts.ratio = Some(loss_ratio(g, ratio_masks, targets, skip)?);
    }
    Ok((loss_total(g, &parts, w)?, parts))
}

impl LossValues {
    pub fn read<T: Float>(g: &Graph<T>, total: Var, parts: &LossParts) -> Self {
        let f = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).to_f64().unwrap_or(f64::NAN));
        Self {
            total: f(Some(total)),
            cls: f(Some(parts.cls)),
            kl: f(parts.kl),
            distill: f(parts.distill),
            ratio: f(parts.ratio),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn cls_fixed_points() {
        let g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::zeros(&[3, 5]));
        let l = loss_cls(&g, uniform, &[0, 2, 4]).unwrap();
        assert!((g.scalar(l) - 5f64.ln()).abs() < 1e-12);
        let sharp = g.constant(t(&[1, 2], &[800.0, 0.0]));
        assert!(g.scalar(loss_cls(&g, sharp, &[0]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cls_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = Tensor::<f64>::from_fn(&[4, 3], |_| rng.gen_range(-2.0..2.0));
        let labels = [2, 0, 1, 1];
        let mut oracle = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &logits.data()[b * 3..b * 3 + 3];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            oracle -= (row[y].exp() / z).ln();
        }
        oracle /= 4.0;
        let g = Graph::new();
        let l = loss_cls(&g, g.constant(logits), &labels).unwrap();
        assert!((g.scalar(l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn distill_tokens_examples() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 3, 1], &[0.0, 5.0, 1.0]));
        let b = g.constant(t(&[1, 3, 1], &[9.0, 3.0, 7.0]));
        let m = g.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        assert!((g.scalar(loss_distill_tokens(&g, a, b, m).unwrap()) - 4.0).abs() < 1e-12);
        assert_eq!(g.scalar(loss_distill_tokens(&g, a, a, m).unwrap()), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (bn, n, c) = (2, 5, 3);
        let x = Tensor::<f64>::from_fn(&[bn, n, c], |_| rng.gen_range(-1.0..1.0));
        let y = Tensor::<f64>::from_fn(&[bn, n, c], |_| rng.gen_range(-1.0..1.0));
        let mk = Tensor::<f64>::from_fn(&[bn, n], |i| (i % 3 != 1) as u8 as f64);
        let mut num = 0.0;
        let mut den = 0.0;
        for bi in 0..bn {
            for i in 0..n {
                let w = mk.data()[bi * n + i];
                den += w;
                for j in 0..c {
                    let k = (bi * n + i) * c + j;
                    num += w * (x.data()[k] - y.data()[k]).powi(2) / c as f64;
                }
            }
        }
        let l = loss_distill_tokens(&g, g.constant(x), g.constant(y), g.constant(mk)).unwrap();
        assert!((g.scalar(l) - num / den).abs() < 1e-12);
    }

    #[test]
    fn distill_dense_examples() {
        let g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 3, 4]));
        let o = g.constant(Tensor::ones(&[2, 3, 4]));
        assert_eq!(g.scalar(loss_distill_dense(&g, z, o).unwrap()), 1.0);
        assert_eq!(g.scalar(loss_distill_dense(&g, o, o).unwrap()), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::from_fn(&[2, 4, 3], |_| rng.gen_range(-1.0..1.0));
        let b = Tensor::<f64>::from_fn(&[2, 4, 3], |_| rng.gen_range(-1.0..1.0));
        let mut s = 0.0;
        for i in 0..24 {
            s += (a.data()[i] - b.data()[i]).powi(2);
        }
        let l = loss_distill_dense(&g, g.constant(a), g.constant(b)).unwrap();
        assert!((g.scalar(l) - s / 24.0).abs() < 1e-12);
    }

    #[test]
    fn kl_examples() {
        let g = Graph::<f64>::new();
        let q = g.constant(t(&[1, 2], &[0.5, 0.5]));
        let sure = g.constant(t(&[1, 2], &[0.0, f64::NEG_INFINITY]));
        assert!((g.scalar(loss_kl(&g, sure, q).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let same = g.constant(t(&[1, 2], &[0.3, 0.3]));
        assert!(g.scalar(loss_kl(&g, same, q).unwrap()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Tensor::<f64>::from_fn(&[3, 4], |_| rng.gen_range(-2.0..2.0));
        let raw = Tensor::<f64>::from_fn(&[3, 4], |_| rng.gen_range(0.1..1.0));
        let mut qv = raw.data().to_vec();
        for row in qv.chunks_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let mut oracle = 0.0;
        for r in 0..3 {
            let row = &logits.data()[r * 4..r * 4 + 4];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for j in 0..4 {
                let p = row[j].exp() / z;
                oracle += p * (p / qv[r * 4 + j]).ln();
            }
        }
        oracle /= 3.0;
        let l = loss_kl(&g, g.constant(logits), g.constant(t(&[3, 4], &qv))).unwrap();
        assert!((g.scalar(l) - oracle).abs() < 1e-12);
    }

    #[test]
    fn kl_tolerates_underflowed_teacher() {
        let g = Graph::<f32>::new();
        let lp = g.leaf(Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap(), true);
        let q = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let l = loss_kl(&g, lp, q).unwrap();
        assert!(g.scalar(l).is_finite());
        let grads = g.backward(l).unwrap();
        assert!(grads.get(lp).unwrap().is_finite());
    }

    #[test]
    fn ratio_examples() {
        let g = Graph::<f64>::new();
        let targets = [0.7, 0.49, 0.343];
        let ones: Vec<Var> = (0..3).map(|_| g.constant(Tensor::ones(&[2, 1000]))).collect();
        let l = g.scalar(loss_ratio(&g, &ones, &targets, 0).unwrap());
        assert!((l - (0.3f64.powi(2) + 0.51f64.powi(2) + 0.657f64.powi(2)) / 3.0).abs() < 1e-12);
        assert!((l - 0.26058).abs() < 1e-5);
        let exact: Vec<Var> = [700, 490, 343]
            .iter()
            .map(|&k| g.constant(Tensor::from_fn(&[2, 1000], |i| ((i % 1000) < k) as u8 as f64)))
            .collect();
        assert!(g.scalar(loss_ratio(&g, &exact, &targets, 0).unwrap()).abs() < 1e-12);
        let with_cls = g.constant(t(&[1, 3], &[1.0, 1.0, 0.0]));
        assert!((g.scalar(loss_ratio(&g, &[with_cls], &[0.5], 1).unwrap())).abs() < 1e-15);
    }

    #[test]
    fn ratio_gradient_lowers_keep_probability_when_over_target() {
        let g = Graph::<f64>::new();
        let keep_logit = g.leaf(t(&[1, 1], &[0.4]), true);
        let z = g.constant(Tensor::zeros(&[1, 1]));
        let lp = g.log_softmax(g.concat(&[z, keep_logit], 1).unwrap());
        let soft = g.reshape(g.narrow(g.softmax(lp), 1, 1, 1).unwrap(), &[1, 1]).unwrap();
        let d = g.straight_through(soft, Tensor::ones(&[1, 1])).unwrap();
        let l = loss_ratio(&g, &[d], &[0.3], 0).unwrap();
        let grad = g.backward(l).unwrap().get(keep_logit).unwrap().data()[0];
        assert!(grad > 0.0, "descent must lower the keep logit, got {grad}");
    }

    #[test]
    fn total_is_linear_in_weights() {
        let g = Graph::<f64>::new();
        let c = |v: f64| g.constant(Tensor::scalar(v));
        let parts = LossParts {
            cls: c(1.5),
            kl: Some(c(0.2)),
            distill: Some(c(0.4)),
            ratio: Some(c(0.05)),
        };
        let zero = LossWeights {
            kl: 0.0,
            distill: 0.0,
            ratio: 0.0,
        };
        assert_eq!(g.scalar(loss_total(&g, &parts, &zero).unwrap()), 1.5);
        let v = g.scalar(loss_total(&g, &parts, &LossWeights::vit()).unwrap());
        assert!((v - (1.5 + 0.5 * 0.2 + 0.5 * 0.4 + 2.0 * 0.05)).abs() < 1e-12);
        assert!(LossWeights { kl: -1.0, ..zero }.validate().is_err());
        assert_eq!(LossWeights::hier().ratio, 10.0);
    }

    #[test]
    fn full_objective_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b, n, c, k) = (2, 4, 3, 3);
        let logits = Tensor::<f64>::from_fn(&[b, k], |_| rng.gen_range(-1.0..1.0));
        let feats = Tensor::<f64>::from_fn(&[b, n, c], |_| rng.gen_range(-1.0..1.0));
        let soft = Tensor::<f64>::from_fn(&[b, n], |_| rng.gen_range(0.2..0.8));
        let teacher = TeacherOutputs {
            features: Tensor::from_fn(&[b, n, c], |_| rng.gen_range(-1.0..1.0)),
            probs: t(&[b, k], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3]),
        };
        let hard = t(&[b, n], &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]);
        for dense in [false, true] {
            let rep = gradcheck::check(&[logits.clone(), feats.clone(), soft.clone()], 1e-6, |g, v| {
                let d = g.constant(hard.clone());
                let target = if dense { DistillTarget::Dense } else { DistillTarget::Tokens(d) };
                let (total, _) = objective(
                    g,
                    v[0],
                    v[1],
                    &[0, 2],
                    Some(&teacher),
                    target,
                    &[v[2]],
                    &[0.6],
                    1,
                    &LossWeights::vit(),
                )?;
                Ok(total)
            })
            .unwrap();
            assert!(rep.max_rel_err < 1e-4, "dense={dense}: {}", rep.max_rel_err);
        }
    }
}
