//! Parameters, layers and the optimiser.
//!
//! Parameters live in a [`ParamStore`] outside any graph. Each training step
//! binds them into a fresh [`Graph`] (frozen groups without gradients), runs
//! forward and backward, then hands the gradients to [`AdamW`].

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{cast, Float, Tensor};

/// Optimiser group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    Predictor,
    FastPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Entry<T> {
    value: Tensor<T>,
    group: Group,
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: Group) -> ParamId {
        let name = name.into();
        assert!(!self.entries.contains_key(&name), "duplicate parameter {name}");
        let (i, _) = self.entries.insert_full(name, Entry { value, group });
        ParamId(i)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>, Group)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, e))| (ParamId(i), n.as_str(), &e.value, e.group))
    }

    /// Number of scalars in a group.
    pub fn count(&self, group: Group) -> usize {
        self.entries
            .values()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }

    /// Replaces values by name; every stored parameter must be present with a
    /// matching shape.
    pub fn load(&mut self, tensors: &IndexMap<String, Tensor<T>>) -> Result<()> {
        for (name, e) in self.entries.iter_mut() {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
            if t.shape() != e.value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }

    /// Loads every parameter of `group` from `tensors`; other groups keep
    /// their values.
    pub fn load_group(&mut self, tensors: &IndexMap<String, Tensor<T>>, group: Group) -> Result<()> {
        for (name, e) in self.entries.iter_mut().filter(|(_, e)| e.group == group) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))?;
            if t.shape() != e.value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }

    /// Parameters of one group, in insertion order.
    pub fn group_map(&self, group: Group) -> IndexMap<String, Tensor<T>> {
        self.entries
            .iter()
            .filter(|(_, e)| e.group == group)
            .map(|(n, e)| (n.clone(), e.value.clone()))
            .collect()
    }

    pub fn to_map(&self) -> IndexMap<String, Tensor<T>> {
        self.entries
            .iter()
            .map(|(n, e)| (n.clone(), e.value.clone()))
            .collect()
    }

    /// Records every parameter as a leaf. Groups for which `trainable` is
    /// false are bound as constants.
    pub fn bind(&self, g: &Graph<T>, trainable: impl Fn(Group) -> bool) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|e| g.leaf(e.value.clone(), trainable(e.group)))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

pub fn normal<T: Float>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| cast(d.sample(rng)))
}

/// Glorot-uniform initialisation of a `[fan_in, fan_out]` matrix.
pub fn xavier<T: Float>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| cast(rng.gen_range(-a..a)))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Float>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: Group,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), xavier(rng, fan_in, fan_out), group);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), group);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    /// Same shape, all weights and biases zero.
    pub fn zeros<T: Float>(
        ps: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: Group,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]), group);
        let b = ps.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), group);
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Float>(ps: &mut ParamStore<T>, name: &str, dim: usize, group: Group) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), Tensor::ones(&[dim]), group);
        let beta = ps.add(format!("{name}.beta"), Tensor::zeros(&[dim]), group);
        Self { gamma, beta }
    }

    pub fn forward<T: Float>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layernorm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: Vec<Option<Moments<T>>>,
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Float> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: Vec::new(),
        }
    }

    /// Applies one update. `lr(group)` gives the step size per group; a
    /// parameter without a gradient (frozen) is left untouched. Weight decay is
    /// applied to matrices only.
    pub fn step(
        &mut self,
        ps: &mut ParamStore<T>,
        bound: &Bound,
        grads: &Gradients<T>,
        lr: impl Fn(Group) -> f64,
    ) {
        if self.state.len() < ps.len() {
            self.state.resize_with(ps.len(), || None);
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, e) in ps.entries.values_mut().enumerate() {
            let Some(grad) = grads.get(bound.vars[i]) else {
                continue;
            };
            let lr = lr(e.group);
            if lr == 0.0 {
                continue;
            }
            let n = e.value.len();
            let st = self.state[i].get_or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - b1.powi(st.t);
            let bc2 = 1.0 - b2.powi(st.t);
            let step: T = cast(lr / bc1);
            let inv_bc2: T = cast(1.0 / bc2);
            let decay: T = if e.value.rank() >= 2 {
                cast(1.0 - lr * self.weight_decay)
            } else {
                T::one()
            };
            let (b1t, b2t): (T, T) = (cast(b1), cast(b2));
            let (ob1, ob2): (T, T) = (cast(1.0 - b1), cast(1.0 - b2));
            let eps: T = cast(self.eps);
            for (((w, g), m), v) in e
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1t * *m + ob1 * *g;
                *v = b2t * *v + ob2 * *g * *g;
                *w = *w * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Cosine decay from `base` to zero after a linear warmup.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut ps = ParamStore::<f64>::new();
        let id = ps.add("x", Tensor::from_f64(&[2], &[3.0, -2.0]).unwrap(), Group::Predictor);
        let mut opt = AdamW::new(0.0);
        for _ in 0..500 {
            let g = Graph::new();
            let b = ps.bind(&g, |_| true);
            let x = b.var(id);
            let sq = g.mul(x, x).unwrap();
            let loss = g.sum(sq);
            let grads = g.backward(loss).unwrap();
            opt.step(&mut ps, &b, &grads, |_| 0.05);
        }
        assert!(ps.get(id).data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f64>::new();
        let lin = Linear::new(&mut ps, &mut rng, "l", 3, 2, Group::Backbone);
        let head = Linear::new(&mut ps, &mut rng, "h", 2, 1, Group::Predictor);
        let before = ps.get(lin.w).clone();
        let mut opt = AdamW::new(0.05);
        let g = Graph::new();
        let b = ps.bind(&g, |grp| grp != Group::Backbone);
        let x = g.constant(Tensor::ones(&[4, 3]));
        let h = lin.forward(&g, &b, x).unwrap();
        let y = head.forward(&g, &b, h).unwrap();
        let loss = g.mean(y);
        let grads = g.backward(loss).unwrap();
        let head_before = ps.get(head.w).clone();
        opt.step(&mut ps, &b, &grads, |_| 0.1);
        assert_eq!(ps.get(lin.w), &before);
        assert_ne!(ps.get(head.w), &head_before);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule {
            base: 1.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(110).abs() < 1e-12);
    }
}
