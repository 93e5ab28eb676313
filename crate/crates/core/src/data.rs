//! Planted-signal token grids.
//!
//! Each sample is a `grid x grid` map of `dim`-dimensional tokens. A small set
//! of informative cells, drawn from the central region, carries the class
//! prototype plus noise. With `distractors` on, every other cell carries the
//! prototype of a random class, so it looks like signal but says nothing about
//! the label. Informative cells also carry a random-sign marker direction,
//! which tells them apart without fixing the class. The label is therefore
//! recoverable only from the informative cells, and the ground-truth map makes
//! every pruning decision auditable.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cast, Float, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub grid: usize,
    pub dim: usize,
    pub classes: usize,
    /// Fraction of cells that carry signal.
    pub informative_frac: f64,
    /// Side of the central square the informative cells are drawn from, as a
    /// fraction of the grid side.
    pub center_frac: f64,
    /// Length of the prototype added to informative cells.
    pub amplitude: f64,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub noise: f64,
    /// Classes come in pairs `+p, -p`. No fixed linear read-out then
    /// separates informative from uninformative cells for every class.
    #[serde(default)]
    pub antipodal: bool,
    /// Uninformative cells carry the prototype of an independently drawn
    /// class instead of zero signal, so unselective pooling mixes in noise.
    #[serde(default)]
    pub distractors: bool,
    /// Length of a random-sign marker direction added to informative cells.
    /// Orthogonal to every prototype; zero disables it.
    #[serde(default)]
    pub marker: f64,
}

impl SyntheticSpec {
    pub fn vit() -> Self {
        Self {
            grid: 8,
            dim: 16,
            classes: 4,
            informative_frac: 0.125,
            center_frac: 0.75,
            amplitude: 1.5,
            noise: 1.0,
            antipodal: true,
            distractors: true,
            marker: 2.5,
        }
    }

    /// Same generator on the 16x16 grid of the hierarchical model.
    pub fn hier() -> Self {
        Self { grid: 16, ..Self::vit() }
    }

    /// Number of distinct prototype directions.
    pub fn directions(&self) -> usize {
        if self.antipodal {
            self.classes / 2
        } else {
            self.classes
        }
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn informative_count(&self) -> usize {
        ((self.informative_frac * self.cells() as f64).round() as usize).max(1)
    }

    /// Row-major indices of the central square.
    pub fn center_cells(&self) -> Vec<usize> {
        let side = ((self.center_frac * self.grid as f64).round() as usize).clamp(1, self.grid);
        let lo = (self.grid - side) / 2;
        (lo..lo + side)
            .flat_map(|r| (lo..lo + side).map(move |c| r * self.grid + c))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid == 0 || self.dim == 0 || self.classes < 2 {
            return bad("dataset needs a positive grid and dim and at least two classes".into());
        }
        if self.directions() + (self.marker != 0.0) as usize > self.dim {
            return bad(format!(
                "{} orthonormal prototype and marker directions do not fit in dimension {}",
                self.directions() + (self.marker != 0.0) as usize,
                self.dim
            ));
        }
        if self.antipodal && self.classes % 2 != 0 {
            return bad(format!("antipodal prototypes need an even class count, got {}", self.classes));
        }
        if !(self.informative_frac > 0.0 && self.informative_frac <= 1.0) {
            return bad(format!("informative_frac {} must lie in (0, 1]", self.informative_frac));
        }
        if self.informative_count() > self.center_cells().len() {
            return bad(format!(
                "{} informative cells do not fit in a central region of {}",
                self.informative_count(),
                self.center_cells().len()
            ));
        }
        if !(self.amplitude.is_finite() && self.marker.is_finite() && self.noise > 0.0 && self.noise.is_finite()) {
            return bad("amplitude must be finite and noise positive".into());
        }
        Ok(())
    }
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::vit()
    }
}

/// One batch of samples.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `[B, grid*grid, dim]`.
    pub x: Tensor<T>,
    pub labels: Vec<usize>,
    /// `informative[b][i]` is true where cell `i` of sample `b` carries signal.
    pub informative: Vec<Vec<bool>>,
}

impl<T: Clone> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Generator with fixed class prototypes.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub spec: SyntheticSpec,
    /// `classes x dim`, rows scaled to the amplitude. Rows are orthonormal,
    /// or with antipodal classes `2k` and `2k + 1` are `+p_k` and `-p_k`.
    pub prototypes: Vec<Vec<f64>>,
    /// Unit marker direction, orthogonal to the prototypes.
    pub marker: Vec<f64>,
}

impl Synthetic {
    /// Prototypes are scaled standard basis vectors under a random rotation
    /// drawn from `seed`.
    pub fn new(spec: SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.classes);
        let want = spec.directions() + (spec.dim > spec.directions()) as usize;
        while basis.len() < want {
            let mut v: Vec<f64> = (0..spec.dim).map(|_| normal.sample(&mut rng)).collect();
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                basis.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let prototypes = (0..spec.classes)
            .map(|k| {
                let (dir, sign) = if spec.antipodal { (k / 2, if k % 2 == 0 { 1.0 } else { -1.0 }) } else { (k, 1.0) };
                basis[dir].iter().map(|x| x * sign * spec.amplitude).collect()
            })
            .collect();
        let marker = if basis.len() > spec.directions() {
            basis.pop().expect("extra direction")
        } else {
            vec![0.0; spec.dim]
        };
        Ok(Self {
            spec,
            prototypes,
            marker,
        })
    }

    pub fn batch<T: Float>(&self, rng: &mut impl Rng, b: usize) -> Batch<T> {
        let s = &self.spec;
        let (n, d) = (s.cells(), s.dim);
        let normal = Normal::new(0.0, s.noise).expect("validated noise");
        let center = s.center_cells();
        let k = s.informative_count();
        let mut x = Vec::with_capacity(b * n * d);
        let mut labels = Vec::with_capacity(b);
        let mut informative = Vec::with_capacity(b);
        for _ in 0..b {
            let y = rng.gen_range(0..s.classes);
            let mut inf = vec![false; n];
            for i in sample(rng, center.len(), k) {
                inf[center[i]] = true;
            }
            for &is_inf in &inf {
                let (proto, mark) = if is_inf {
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    (Some(y), sign * s.marker)
                } else if s.distractors {
                    (Some(rng.gen_range(0..s.classes)), 0.0)
                } else {
                    (None, 0.0)
                };
                for j in 0..d {
                    let signal = proto.map_or(0.0, |k| self.prototypes[k][j]) + mark * self.marker[j];
                    x.push(cast(signal + normal.sample(rng)));
                }
            }
            labels.push(y);
            informative.push(inf);
        }
        Batch {
            x: Tensor::new(vec![b, n, d], x).expect("sized above"),
            labels,
            informative,
        }
    }

    /// A fixed evaluation set, split into batches.
    pub fn eval_set<T: Float>(&self, seed: u64, size: usize, batch: usize) -> Vec<Batch<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        let mut left = size;
        while left > 0 {
            let b = left.min(batch.max(1));
            out.push(self.batch(&mut rng, b));
            left -= b;
        }
        out
    }

    /// Accuracy of `argmax_k sum_{i in cells} <x_i, p_k>` when `cells(b)`
    /// picks the cells each sample may use.
    pub fn projection_accuracy<T: Float>(&self, batch: &Batch<T>, cells: impl Fn(usize) -> Vec<usize>) -> f64 {
        let (n, d) = (self.spec.cells(), self.spec.dim);
        let mut correct = 0;
        for (bi, &y) in batch.labels.iter().enumerate() {
            let idx = cells(bi);
            let score = |k: usize| -> f64 {
                idx.iter()
                    .map(|&i| {
                        let row = &batch.x.data()[(bi * n + i) * d..(bi * n + i + 1) * d];
                        row.iter()
                            .zip(&self.prototypes[k])
                            .map(|(a, p)| a.to_f64().unwrap_or(0.0) * p)
                            .sum::<f64>()
                    })
                    .sum()
            };
            let best = (0..self.spec.classes)
                .map(|k| (k, score(k)))
                .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
            correct += (best.0 == y) as usize;
        }
        correct as f64 / batch.len().max(1) as f64
    }

    /// Accuracy of the matched-filter classifier that knows the informative
    /// cells (Bayes optimal for this generator).
    pub fn bayes_informative<T: Float>(&self, batch: &Batch<T>) -> f64 {
        self.projection_accuracy(batch, |b| cells_where(&batch.informative[b], true))
    }

    /// The same classifier restricted to uninformative cells.
    pub fn bayes_uninformative<T: Float>(&self, batch: &Batch<T>) -> f64 {
        self.projection_accuracy(batch, |b| cells_where(&batch.informative[b], false))
    }
}

fn cells_where(mask: &[bool], v: bool) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m == v).map(|(i, _)| i).collect()
}

/// Fraction of `kept` cells that are informative, averaged over samples.
pub fn precision_at_m(kept: &[Vec<usize>], informative: &[Vec<bool>]) -> f64 {
    let per: Vec<f64> = kept
        .iter()
        .zip(informative)
        .filter(|(k, _)| !k.is_empty())
        .map(|(k, inf)| k.iter().filter(|&&i| inf[i]).count() as f64 / k.len() as f64)
        .collect();
    per.iter().sum::<f64>() / per.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototypes_are_orthogonal_with_requested_length() {
        let orth = SyntheticSpec {
            antipodal: false,
            ..SyntheticSpec::vit()
        };
        let s = Synthetic::new(orth, 3).unwrap();
        for (i, a) in s.prototypes.iter().enumerate() {
            for (j, b) in s.prototypes.iter().enumerate() {
                let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.5f64.powi(2) } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn antipodal_prototypes_pair_up() {
        let s = Synthetic::new(SyntheticSpec::vit(), 3).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let a2 = 1.5f64.powi(2);
        assert!((dot(&s.prototypes[0], &s.prototypes[1]) + a2).abs() < 1e-9);
        assert!((dot(&s.prototypes[2], &s.prototypes[3]) + a2).abs() < 1e-9);
        assert!(dot(&s.prototypes[0], &s.prototypes[2]).abs() < 1e-9);
        let sum: Vec<f64> = (0..16).map(|j| s.prototypes.iter().map(|p| p[j]).sum()).collect();
        assert!(sum.iter().all(|v| v.abs() < 1e-9));
        assert!(SyntheticSpec { classes: 3, ..SyntheticSpec::vit() }.validate().is_err());
    }

    #[test]
    fn informative_cells_lie_in_the_center() {
        let s = Synthetic::new(SyntheticSpec::vit(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = s.batch::<f32>(&mut rng, 50);
        let center = s.spec.center_cells();
        assert_eq!(center.len(), 36);
        for inf in &b.informative {
            assert_eq!(inf.iter().filter(|&&v| v).count(), 8);
            assert!(inf.iter().enumerate().all(|(i, &v)| !v || center.contains(&i)));
        }
        assert_eq!(b.x.shape(), &[50, 64, 16]);
    }

    #[test]
    fn bayes_accuracies() {
        let s = Synthetic::new(SyntheticSpec::vit(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = s.batch::<f64>(&mut rng, 4000);
        let inf = s.bayes_informative(&b);
        let uninf = s.bayes_uninformative(&b);
        assert!(inf > 0.95, "{inf}");
        assert!((uninf - 0.25).abs() < 0.03, "{uninf}");
    }

    #[test]
    fn precision_examples() {
        let inf = vec![vec![true, false, true, false]];
        assert_eq!(precision_at_m(&[vec![0, 2]], &inf), 1.0);
        assert_eq!(precision_at_m(&[vec![0, 1]], &inf), 0.5);
    }

    #[test]
    fn same_seed_same_data() {
        let s = Synthetic::new(SyntheticSpec::hier(), 9).unwrap();
        let a = s.eval_set::<f32>(5, 10, 4);
        let b = s.eval_set::<f32>(5, 10, 4);
        assert_eq!(a.len(), 3);
        assert_eq!(a[2].len(), 2);
        assert_eq!(a[0].x, b[0].x);
        assert!(SyntheticSpec { classes: 40, ..SyntheticSpec::vit() }.validate().is_err());
    }
}
