//! Hierarchical backbone with asymmetric slow/fast computation.
//!
//! Every block mixes space with a depthwise convolution on the full map. The
//! pointwise feed-forward network (slow path) then runs only on locations the
//! predictor marks informative; the rest go through a cheap fast path and the
//! two groups are written back to their original positions, so the map keeps
//! its shape.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, Bound, Group, LayerNorm, Linear, ParamId, ParamStore};
use crate::predictor::{gumbel_sample, keep_count, topk_select, Predictor};
use crate::tensor::{Float, Tensor};
use crate::vit::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastPathKind {
    /// `Linear(C, C)`.
    #[default]
    Linear,
    /// `Linear(C, C/4) -> GELU -> Linear(C/4, C)`.
    Bottleneck,
    /// A learned per-channel vector, independent of the input.
    LearnableMask,
    /// Zeros.
    ZeroMask,
}

impl FastPathKind {
    pub const ALL: [FastPathKind; 4] = [
        FastPathKind::Linear,
        FastPathKind::Bottleneck,
        FastPathKind::LearnableMask,
        FastPathKind::ZeroMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FastPathKind::Linear => "linear",
            FastPathKind::Bottleneck => "bottleneck",
            FastPathKind::LearnableMask => "learnable_mask",
            FastPathKind::ZeroMask => "zero_mask",
        }
    }

    /// Parameters of one fast path at width `c`.
    pub fn param_count(self, c: usize) -> usize {
        let h = (c / 4).max(1);
        match self {
            FastPathKind::Linear => c * c + c,
            FastPathKind::Bottleneck => c * h + h + h * c + c,
            FastPathKind::LearnableMask => c,
            FastPathKind::ZeroMask => 0,
        }
    }
}

impl std::str::FromStr for FastPathKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown fast path `{s}` (expected linear, bottleneck, learnable_mask or zero_mask)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierConfig {
    /// Blocks per stage.
    pub depths: Vec<usize>,
    /// Channels per stage.
    pub widths: Vec<usize>,
    /// Side of the input grid; halved before every stage after the first.
    pub grid: usize,
    pub in_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_kernel() -> usize {
    7
}

fn default_mlp_ratio() -> usize {
    4
}

impl HierConfig {
    /// Desk-scale default: depths [1,1,9,1], widths [32,64,128,256], 16x16 grid.
    pub fn tiny(in_dim: usize, num_classes: usize) -> Self {
        Self {
            depths: vec![1, 1, 9, 1],
            widths: vec![32, 64, 128, 256],
            grid: 16,
            in_dim,
            num_classes,
            kernel: 7,
            mlp_ratio: 4,
        }
    }

    /// Side of the feature map in stage `s`.
    pub fn side(&self, s: usize) -> usize {
        self.grid >> s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depths.is_empty() || self.depths.len() != self.widths.len() {
            return bad("depths and widths must be non-empty and of equal length".into());
        }
        if self.widths.iter().any(|&w| w == 0) || self.in_dim == 0 || self.num_classes == 0 {
            return bad("widths, in_dim and num_classes must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel {} must be odd", self.kernel));
        }
        let last = self.depths.len() - 1;
        if self.grid == 0 || self.grid % (1 << last) != 0 {
            return bad(format!(
                "grid {} must be divisible by {} for {} stages",
                self.grid,
                1 << last,
                self.depths.len()
            ));
        }
        Ok(())
    }
}

/// Where and how strongly one stage is sparsified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HierSchedule {
    pub rho: f64,
    /// Stage (zero-based) that is sparsified.
    pub stage: usize,
    /// Zero-based layer indices within that stage where predictors run.
    pub layers: Vec<usize>,
    pub ratios: Vec<f64>,
}

impl HierSchedule {
    /// Ratios `[rho, rho-0.2, rho-0.4]` at layers `[k, 2k, 3k]`,
    /// `k = floor(depth / 9)`.
    pub fn arithmetic(rho: f64, stage: usize, stage_depth: usize) -> Self {
        let k = (stage_depth / 9).max(1);
        Self {
            rho,
            stage,
            layers: vec![k, 2 * k, 3 * k],
            ratios: vec![rho, rho - 0.2, rho - 0.4],
        }
    }

    pub fn is_dense(&self) -> bool {
        self.ratios.iter().all(|&r| r >= 1.0)
    }

    /// Index of the decision in force at `layer`, if any.
    pub fn decision_for(&self, layer: usize) -> Option<usize> {
        self.layers.iter().rposition(|&l| l <= layer)
    }

    pub fn validate(&self, cfg: &HierConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage >= cfg.depths.len() {
            return bad(format!("sparsified stage {} does not exist", self.stage));
        }
        if self.layers.len() != self.ratios.len() {
            return bad("schedule layers and ratios differ in length".into());
        }
        if !self.layers.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("layers {:?} must be strictly increasing", self.layers));
        }
        if self.layers.iter().any(|&l| l >= cfg.depths[self.stage]) {
            return bad(format!(
                "layers {:?} exceed the depth {} of stage {}",
                self.layers, cfg.depths[self.stage], self.stage
            ));
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad(format!("keep ratios {:?} must lie in (0, 1]", self.ratios));
        }
        let hw = cfg.side(self.stage).pow(2);
        if self.ratios.iter().any(|&r| keep_count(r, hw) == 0) {
            return bad(format!("keep ratios {:?} leave no location of {hw}", self.ratios));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub enum FastPath {
    Linear(Linear),
    Bottleneck(Linear, Linear),
    LearnableMask(ParamId),
    ZeroMask,
}

impl FastPath {
    fn new<T: Float>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        kind: FastPathKind,
        c: usize,
    ) -> Self {
        let grp = Group::FastPath;
        match kind {
            FastPathKind::Linear => FastPath::Linear(Linear::new(ps, rng, &format!("{name}.fast"), c, c, grp)),
            FastPathKind::Bottleneck => {
                let h = (c / 4).max(1);
                FastPath::Bottleneck(
                    Linear::new(ps, rng, &format!("{name}.fast1"), c, h, grp),
                    Linear::new(ps, rng, &format!("{name}.fast2"), h, c, grp),
                )
            }
            FastPathKind::LearnableMask => {
                FastPath::LearnableMask(ps.add(format!("{name}.fast_mask"), normal(rng, &[c], 0.02), grp))
            }
            FastPathKind::ZeroMask => FastPath::ZeroMask,
        }
    }

    /// Applies the fast path to rows `x: [R, C]`; `None` means zeros.
    fn forward<T: Float>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Option<Var>> {
        Ok(match self {
            FastPath::Linear(l) => Some(l.forward(g, p, x)?),
            FastPath::Bottleneck(a, b) => {
                let h = g.gelu(a.forward(g, p, x)?);
                Some(b.forward(g, p, h)?)
            }
            FastPath::LearnableMask(id) => {
                let rows = g.shape(x)[..g.shape(x).len() - 1].iter().product();
                let v = g.broadcast_axis(p.var(*id), 0, rows)?;
                Some(g.reshape(v, &g.shape(x))?)
            }
            FastPath::ZeroMask => None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HierBlock {
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub ln: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fast: Option<FastPath>,
    pub dim: usize,
}

impl HierBlock {
    fn new<T: Float>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        c: usize,
        cfg: &HierConfig,
        fast: Option<FastPathKind>,
    ) -> Self {
        let k = cfg.kernel;
        let std = (1.0 / (k * k) as f64).sqrt();
        let grp = Group::Backbone;
        Self {
            dw_w: ps.add(format!("{name}.dw_w"), normal(rng, &[k, k, c], std), grp),
            dw_b: ps.add(format!("{name}.dw_b"), Tensor::zeros(&[c]), grp),
            ln: LayerNorm::new(ps, &format!("{name}.ln"), c, grp),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), c, cfg.mlp_ratio * c, grp),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), cfg.mlp_ratio * c, c, grp),
            fast: fast.map(|kind| FastPath::new(ps, rng, name, kind, c)),
            dim: c,
        }
    }

    /// Spatial mixing with residual: `m = x + DWConv(x)` on `[B, H, W, C]`.
    pub fn mix<T: Float>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.depthwise_conv2d(x, p.var(self.dw_w), p.var(self.dw_b))?;
        g.add(x, y)
    }

    fn slow<T: Float>(&self, g: &Graph<T>, p: &Bound, n: Var) -> Result<Var> {
        let h = g.gelu(self.fc1.forward(g, p, n)?);
        self.fc2.forward(g, p, h)
    }

    fn fast_path(&self) -> Result<&FastPath> {
        self.fast
            .as_ref()
            .ok_or_else(|| Error::invalid("hier block", "block has no fast path"))
    }

    /// Unmodified block on the mixed map `m`.
    pub fn dense_ffn<T: Float>(&self, g: &Graph<T>, p: &Bound, m: Var) -> Result<Var> {
        let n = self.ln.forward(g, p, m)?;
        let s = self.slow(g, p, n)?;
        g.add(m, s)
    }

    /// Constant-shape combine: `m + D*slow(n) + (1-D)*fast(n)` with
    /// `D: [B, H*W]` broadcast over channels.
    pub fn masked_ffn<T: Float>(&self, g: &Graph<T>, p: &Bound, m: Var, d: Var) -> Result<Var> {
        let shape = g.shape(m);
        let (b, c) = (shape[0], shape[3]);
        let hw = shape[1] * shape[2];
        let n = self.ln.forward(g, p, m)?;
        let n = g.reshape(n, &[b, hw, c])?;
        let slow = self.slow(g, p, n)?;
        let mut ffn = g.mul_rows(slow, d)?;
        if let Some(f) = self.fast_path()?.forward(g, p, n)? {
            let inv = g.one_minus(d);
            let f = g.mul_rows(f, inv)?;
            ffn = g.add(ffn, f)?;
        }
        let ffn = g.reshape(ffn, &shape)?;
        g.add(m, ffn)
    }

    /// Split/reassemble execution. `kept[b]` lists the locations of sample
    /// `b` sent through the slow path; the rest take the fast path.
    pub fn split_ffn<T: Float>(&self, g: &Graph<T>, p: &Bound, m: Var, kept: &[Vec<usize>]) -> Result<Var> {
        let shape = g.shape(m);
        let (b, c) = (shape[0], shape[3]);
        let hw = shape[1] * shape[2];
        if kept.len() != b {
            return Err(Error::invalid("split_ffn", "one kept list per sample required"));
        }
        let n = self.ln.forward(g, p, m)?;
        let flat = g.reshape(n, &[b * hw, c])?;
        let mut slow_rows = Vec::new();
        let mut fast_rows = Vec::new();
        for (bi, k) in kept.iter().enumerate() {
            let mut is_kept = vec![false; hw];
            for &i in k {
                if i >= hw {
                    return Err(Error::IndexOutOfRange {
                        op: "split_ffn",
                        index: i,
                        len: hw,
                    });
                }
                is_kept[i] = true;
            }
            for (i, &kk) in is_kept.iter().enumerate() {
                if kk {
                    slow_rows.push(bi * hw + i);
                } else {
                    fast_rows.push(bi * hw + i);
                }
            }
        }
        let mut out = g.constant(Tensor::zeros(&[b * hw, c]));
        if !slow_rows.is_empty() {
            let x1 = g.gather_rows(flat, &slow_rows)?;
            let y1 = self.slow(g, p, x1)?;
            out = g.scatter_rows(out, &slow_rows, y1)?;
        }
        if !fast_rows.is_empty() {
            let x2 = g.gather_rows(flat, &fast_rows)?;
            if let Some(y2) = self.fast_path()?.forward(g, p, x2)? {
                out = g.scatter_rows(out, &fast_rows, y2)?;
            }
        }
        let out = g.reshape(out, &shape)?;
        g.add(m, out)
    }
}

/// Result of [`split`].
#[derive(Debug, Clone, PartialEq)]
pub struct SplitParts<T> {
    /// Kept rows in row-major position order, `[m, C]`.
    pub x1: Tensor<T>,
    /// Remaining rows, `[HW - m, C]`.
    pub x2: Tensor<T>,
    pub kept: Vec<usize>,
    pub rest: Vec<usize>,
}

/// Partitions the rows of `x: [H*W, C]` (or `[H, W, C]`) by a binary mask.
pub fn split<T: Float>(x: &Tensor<T>, d: &[T]) -> Result<SplitParts<T>> {
    let c = x.last_dim();
    let rows = x.len() / c.max(1);
    if d.len() != rows {
        return Err(Error::shape("split", x.shape(), &[d.len()]));
    }
    let (kept, rest): (Vec<usize>, Vec<usize>) = (0..rows).partition(|&i| d[i] > T::zero());
    let take = |idx: &[usize]| {
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        Tensor::new(vec![idx.len(), c], out)
    };
    Ok(SplitParts {
        x1: take(&kept)?,
        x2: take(&rest)?,
        kept,
        rest,
    })
}

/// Inverse of [`split`]: writes rows back to their positions, `[H*W, C]`.
pub fn reassemble<T: Float>(x1: &Tensor<T>, x2: &Tensor<T>, kept: &[usize], rest: &[usize]) -> Result<Tensor<T>> {
    let c = x1.last_dim().max(x2.last_dim());
    let rows = kept.len() + rest.len();
    if x1.len() != kept.len() * c || x2.len() != rest.len() * c {
        return Err(Error::shape("reassemble", x1.shape(), x2.shape()));
    }
    let mut out = vec![T::zero(); rows * c];
    let mut seen = vec![false; rows];
    for (src, idx) in [(x1, kept), (x2, rest)] {
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid("reassemble", format!("bad position {i}")));
            }
            out[i * c..(i + 1) * c].copy_from_slice(&src.data()[r * c..(r + 1) * c]);
        }
    }
    Tensor::new(vec![rows, c], out)
}

#[derive(Debug, Clone)]
pub struct HierTrainOutput {
    pub logits: Var,
    /// Last-stage feature map `[B, h*w, C]`.
    pub features: Var,
    /// Decision `[B, H*W]` of each scheduled layer.
    pub masks: Vec<Var>,
    pub log_pi: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct HierInferOutput<T> {
    pub logits: Tensor<T>,
    /// `kept[s][b]`: ascending locations sent through the slow path by the
    /// decision of scheduled layer `s`.
    pub kept: Vec<Vec<Vec<usize>>>,
    /// `scores[s]`: `[B, H*W]` keep scores at scheduled layer `s`.
    pub scores: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct HierModel {
    pub cfg: HierConfig,
    pub fast_kind: FastPathKind,
    pub stem: Linear,
    pub stem_ln: LayerNorm,
    pub downs: Vec<(LayerNorm, Linear)>,
    pub stages: Vec<Vec<HierBlock>>,
    pub head_ln: LayerNorm,
    pub head: Linear,
    pub predictors: Vec<Predictor>,
    pub sched_stage: usize,
}

impl HierModel {
    /// Blocks of `sched.stage` from the first scheduled layer on receive a
    /// fast path; one predictor is created per scheduled layer.
    pub fn new<T: Float>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &HierConfig,
        sched: &HierSchedule,
        fast_kind: FastPathKind,
    ) -> Result<Self> {
        cfg.validate()?;
        sched.validate(cfg)?;
        let stem = Linear::new(ps, rng, "stem", cfg.in_dim, cfg.widths[0], Group::Backbone);
        let stem_ln = LayerNorm::new(ps, "stem_ln", cfg.widths[0], Group::Backbone);
        let mut downs = Vec::new();
        let mut stages = Vec::new();
        for (s, (&depth, &c)) in cfg.depths.iter().zip(&cfg.widths).enumerate() {
            if s > 0 {
                let prev = cfg.widths[s - 1];
                downs.push((
                    LayerNorm::new(ps, &format!("down{s}.ln"), prev, Group::Backbone),
                    Linear::new(ps, rng, &format!("down{s}.proj"), 4 * prev, c, Group::Backbone),
                ));
            }
            let first = sched.layers.first().copied().unwrap_or(usize::MAX);
            let blocks = (0..depth)
                .map(|j| {
                    let fast = (s == sched.stage && j >= first).then_some(fast_kind);
                    HierBlock::new(ps, rng, &format!("stage{s}.block{j}"), c, cfg, fast)
                })
                .collect();
            stages.push(blocks);
        }
        let last = *cfg.widths.last().unwrap();
        let head_ln = LayerNorm::new(ps, "head_ln", last, Group::Backbone);
        let head = Linear::new(ps, rng, "head", last, cfg.num_classes, Group::Backbone);
        let c = cfg.widths[sched.stage];
        let predictors = (0..sched.layers.len())
            .map(|i| Predictor::new(ps, rng, &format!("predictor{i}"), c, Group::Predictor))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            fast_kind,
            stem,
            stem_ln,
            downs,
            stages,
            head_ln,
            head,
            predictors,
            sched_stage: sched.stage,
        })
    }

    fn check(&self, sched: &HierSchedule, shape: &[usize]) -> Result<usize> {
        sched.validate(&self.cfg)?;
        if sched.stage != self.sched_stage || sched.layers.len() > self.predictors.len() {
            return Err(Error::Config("schedule does not match the model's sparsified stage".into()));
        }
        let n = self.cfg.grid * self.cfg.grid;
        if shape.len() != 3 || shape[1] != n || shape[2] != self.cfg.in_dim {
            return Err(Error::shape("hier input", shape, &[n, self.cfg.in_dim]));
        }
        Ok(shape[0])
    }

    fn stem_forward<T: Float>(&self, g: &Graph<T>, p: &Bound, x: Var, b: usize) -> Result<Var> {
        let side = self.cfg.grid;
        let x = g.reshape(x, &[b, side, side, self.cfg.in_dim])?;
        let x = self.stem.forward(g, p, x)?;
        self.stem_ln.forward(g, p, x)
    }

    /// LayerNorm, 2x2 space-to-depth and a linear projection.
    fn downsample<T: Float>(&self, g: &Graph<T>, p: &Bound, s: usize, x: Var) -> Result<Var> {
        let sh = g.shape(x);
        let (b, h, w, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (ln, proj) = &self.downs[s - 1];
        let x = ln.forward(g, p, x)?;
        let x = g.reshape(x, &[b, h / 2, 2, w / 2, 2, c])?;
        let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
        let x = g.reshape(x, &[b, h / 2, w / 2, 4 * c])?;
        proj.forward(g, p, x)
    }

    fn head_forward<T: Float>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let sh = g.shape(x);
        let (b, hw, c) = (sh[0], sh[1] * sh[2], sh[3]);
        let features = g.reshape(x, &[b, hw, c])?;
        let t = g.permute(features, &[0, 2, 1])?;
        let pooled = g.mean_last(t);
        let pooled = self.head_ln.forward(g, p, pooled)?;
        Ok((self.head.forward(g, p, pooled)?, features))
    }

    fn score<T: Float>(&self, g: &Graph<T>, p: &Bound, idx: usize, m: Var) -> Result<Var> {
        let sh = g.shape(m);
        let (b, hw, c) = (sh[0], sh[1] * sh[2], sh[3]);
        let tokens = g.reshape(m, &[b, hw, c])?;
        let ones = g.constant(Tensor::ones(&[b, hw]));
        self.predictors[idx].log_probs(g, p, tokens, ones)
    }

    /// Constant-shape training pass with independent per-layer decisions.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_train<T: Float>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        sched: &HierSchedule,
        policy: Policy,
        tau: f64,
        forced: Option<&[Tensor<T>]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<HierTrainOutput> {
        let b = self.check(sched, &g.shape(x))?;
        if policy == Policy::Attention {
            return Err(Error::Config("the attention policy needs an attention mixer".into()));
        }
        let sparse = !sched.is_dense();
        let hw = self.cfg.side(sched.stage).pow(2);
        if let Some(f) = forced {
            if f.len() != sched.layers.len() || f.iter().any(|t| t.shape() != [b, hw]) {
                return Err(Error::invalid("forward_train", "forced decisions must be [B, H*W] per layer"));
            }
        }
        let mut x = self.stem_forward(g, p, x, b)?;
        let mut masks = Vec::new();
        let mut log_pi = Vec::new();
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.downsample(g, p, s, x)?;
            }
            for (j, block) in blocks.iter().enumerate() {
                let m = block.mix(g, p, x)?;
                let active = if sparse && s == sched.stage { sched.decision_for(j) } else { None };
                x = match active {
                    None => block.dense_ffn(g, p, m)?,
                    Some(i) => {
                        if sched.layers[i] == j {
                            let d = match (forced, policy) {
                                (Some(f), _) => g.constant(f[i].clone()),
                                (None, Policy::Learned) => {
                                    let lp = self.score(g, p, i, m)?;
                                    log_pi.push(lp);
                                    let d = gumbel_sample(g, lp, tau, rng)?;
                                    g.reshape(d, &[b, hw])?
                                }
                                (None, _) => g.constant(random_locations(b, hw, keep_count(sched.ratios[i], hw), rng)),
                            };
                            masks.push(d);
                        }
                        block.masked_ffn(g, p, m, masks[i])?
                    }
                };
            }
            if !g.with_value(x, |t| t.is_finite()) {
                return Err(Error::Divergence { stage: s });
            }
        }
        let (logits, features) = self.head_forward(g, p, x)?;
        Ok(HierTrainOutput {
            logits,
            features,
            masks,
            log_pi,
        })
    }

    /// Inference: the top `floor(rho * H*W)` locations per decision take the
    /// slow path, the others the fast path.
    pub fn forward_infer<T: Float>(
        &self,
        ps: &ParamStore<T>,
        input: &Tensor<T>,
        sched: &HierSchedule,
        policy: Policy,
        rng: &mut ChaCha8Rng,
    ) -> Result<HierInferOutput<T>> {
        let b = self.check(sched, input.shape())?;
        if policy == Policy::Attention {
            return Err(Error::Config("the attention policy needs an attention mixer".into()));
        }
        let sparse = !sched.is_dense();
        let hw = self.cfg.side(sched.stage).pow(2);
        let g = Graph::new();
        let p = ps.bind(&g, |_| false);
        let xin = g.constant(input.clone());
        let mut x = self.stem_forward(&g, &p, xin, b)?;
        let mut kept: Vec<Vec<Vec<usize>>> = Vec::new();
        let mut scores = Vec::new();
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.downsample(&g, &p, s, x)?;
            }
            for (j, block) in blocks.iter().enumerate() {
                let m = block.mix(&g, &p, x)?;
                let active = if sparse && s == sched.stage { sched.decision_for(j) } else { None };
                x = match active {
                    None => block.dense_ffn(&g, &p, m)?,
                    Some(i) => {
                        if sched.layers[i] == j {
                            let sc: Vec<T> = match policy {
                                Policy::Learned => {
                                    let lp = self.score(&g, &p, i, m)?;
                                    g.with_value(lp, |t| t.data().chunks(2).map(|r| r[1].exp()).collect())
                                }
                                _ => (0..b * hw).map(|_| crate::tensor::cast(rng.gen::<f64>())).collect(),
                            };
                            let mcount = keep_count(sched.ratios[i], hw);
                            let mut layer_kept = Vec::with_capacity(b);
                            for row in sc.chunks(hw) {
                                let mut top = topk_select(row, mcount)?;
                                top.sort_unstable();
                                layer_kept.push(top);
                            }
                            kept.push(layer_kept);
                            scores.push(Tensor::new(vec![b, hw], sc)?);
                        }
                        block.split_ffn(&g, &p, m, &kept[i])?
                    }
                };
            }
        }
        let (logits, _) = self.head_forward(&g, &p, x)?;
        Ok(HierInferOutput {
            logits: g.value(logits),
            kept,
            scores,
        })
    }
}

/// Exactly `m` random ones per row of a `[b, hw]` mask.
pub fn random_locations<T: Float>(b: usize, hw: usize, m: usize, rng: &mut impl Rng) -> Tensor<T> {
    let mut t = Tensor::zeros(&[b, hw]);
    for row in t.data_mut().chunks_mut(hw) {
        for i in sample(rng, hw, m.min(hw)) {
            row[i] = T::one();
        }
    }
    t
}

/// Binary masks `[B, H*W]` matching per-sample kept lists.
pub fn masks_from_kept<T: Float>(kept: &[Vec<Vec<usize>>], hw: usize) -> Vec<Tensor<T>> {
    kept.iter()
        .map(|layer| {
            let mut t = Tensor::zeros(&[layer.len(), hw]);
            for (bi, idx) in layer.iter().enumerate() {
                for &i in idx {
                    t.data_mut()[bi * hw + i] = T::one();
                }
            }
            t
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg() -> HierConfig {
        HierConfig {
            depths: vec![1, 1, 9, 1],
            widths: vec![8, 8, 16, 16],
            grid: 16,
            in_dim: 3,
            num_classes: 4,
            kernel: 3,
            mlp_ratio: 4,
        }
    }

    fn block(kind: FastPathKind, seed: u64) -> (ParamStore<f64>, HierBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let b = HierBlock::new(&mut ps, &mut rng, "b", 6, &small_cfg(), Some(kind));
        (ps, b)
    }

    fn map(seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[2, 4, 4, 6], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn masked_ffn_reduces_to_single_path() {
        for kind in FastPathKind::ALL {
            let (ps, blk) = block(kind, 1);
            let g = Graph::new();
            let p = ps.bind(&g, |_| false);
            let x = g.constant(map(2));
            let m = blk.mix(&g, &p, x).unwrap();
            let ones = g.constant(Tensor::ones(&[2, 16]));
            let dense = g.value(blk.dense_ffn(&g, &p, m).unwrap());
            let all = g.value(blk.masked_ffn(&g, &p, m, ones).unwrap());
            assert!(dense.max_abs_diff(&all) < 1e-12);
            let zeros = g.constant(Tensor::zeros(&[2, 16]));
            let none = g.value(blk.masked_ffn(&g, &p, m, zeros).unwrap());
            assert_eq!(none.shape(), &[2, 4, 4, 6]);
            if kind == FastPathKind::ZeroMask {
                assert_eq!(none, g.value(m));
            }
        }
    }

    #[test]
    fn split_execution_matches_masked_combine() {
        for kind in FastPathKind::ALL {
            let (ps, blk) = block(kind, 3);
            let g = Graph::new();
            let p = ps.bind(&g, |_| false);
            let x = g.constant(map(4));
            let m = blk.mix(&g, &p, x).unwrap();
            let kept = vec![vec![0, 3, 5, 9, 15], vec![1, 2, 3, 4, 5, 6, 7, 8]];
            let masks = masks_from_kept::<f64>(&[kept.clone()], 16);
            let d = g.constant(masks[0].clone());
            let a = g.value(blk.masked_ffn(&g, &p, m, d).unwrap());
            let b = g.value(blk.split_ffn(&g, &p, m, &kept).unwrap());
            assert!(a.max_abs_diff(&b) < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn split_reassemble_roundtrip() {
        let x = map(5).reshape(&[2 * 16, 6]).unwrap();
        let d: Vec<f64> = (0..32).map(|i| ((i / 4 + i) % 2) as f64).collect();
        let parts = split(&x, &d).unwrap();
        assert_eq!(parts.x1.shape()[0] + parts.x2.shape()[0], 32);
        let back = reassemble(&parts.x1, &parts.x2, &parts.kept, &parts.rest).unwrap();
        assert_eq!(back, x);
        let all = split(&x, &[1.0; 32]).unwrap();
        assert_eq!(all.x1, x);
        assert_eq!(all.x2.len(), 0);
    }

    #[test]
    fn fast_paths_are_lighter_than_slow() {
        for kind in FastPathKind::ALL {
            let c = 64;
            assert!(kind.param_count(c) < 2 * 4 * c * c + 5 * c);
            assert_eq!(kind.name().parse::<FastPathKind>().unwrap(), kind);
        }
    }

    #[test]
    fn schedule_layers_follow_stage_depth() {
        let s = HierSchedule::arithmetic(0.9, 2, 27);
        assert_eq!(s.layers, vec![3, 6, 9]);
        assert_eq!(s.decision_for(2), None);
        assert_eq!(s.decision_for(5), Some(0));
        assert_eq!(s.decision_for(26), Some(2));
        let t = HierSchedule::arithmetic(0.7, 2, 9);
        assert_eq!(t.layers, vec![1, 2, 3]);
        assert!((t.ratios[2] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn model_inference_matches_training_under_pinned_decisions() {
        let cfg = small_cfg();
        let sched = HierSchedule::arithmetic(0.7, 2, 9);
        for kind in FastPathKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut ps = ParamStore::<f64>::new();
            let model = HierModel::new(&mut ps, &mut rng, &cfg, &sched, kind).unwrap();
            let x = Tensor::from_fn(&[2, 256, 3], |_| rng.gen_range(-1.0..1.0));
            let inf = model.forward_infer(&ps, &x, &sched, Policy::Learned, &mut rng).unwrap();
            assert_eq!(inf.logits.shape(), &[2, 4]);
            for (layer, r) in inf.kept.iter().zip(&sched.ratios) {
                assert!(layer.iter().all(|k| k.len() == keep_count(*r, 16)));
            }
            let forced = masks_from_kept::<f64>(&inf.kept, 16);
            let g = Graph::new();
            let p = ps.bind(&g, |_| true);
            let xv = g.constant(x.clone());
            let out = model
                .forward_train(&g, &p, xv, &sched, Policy::Learned, 1.0, Some(&forced), &mut rng)
                .unwrap();
            assert!(g.value(out.logits).max_abs_diff(&inf.logits) < 1e-10);
        }
    }
}
