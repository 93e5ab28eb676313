//! Isotropic vision transformer with progressive token sparsification.
//!
//! Training keeps every token and hides pruned ones through masked attention;
//! inference physically removes them, keeping the top-scoring patch tokens at
//! each stage.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{class_attention, Attention};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{normal, Bound, Group, LayerNorm, Linear, ParamId, ParamStore};
use crate::predictor::{gumbel_sample, keep_count, topk_select, update_mask, Predictor};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Features per input patch.
    pub in_dim: usize,
    pub num_classes: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl VitConfig {
    /// Desk-scale default: depth 6, width 128, 4 heads, 8x8 grid.
    pub fn tiny_d6(in_dim: usize, num_classes: usize) -> Self {
        Self {
            depth: 6,
            embed_dim: 128,
            heads: 4,
            mlp_ratio: 4,
            grid_h: 8,
            grid_w: 8,
            in_dim,
            num_classes,
        }
    }

    pub fn n_patch(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Patch tokens plus the class token.
    pub fn n_tokens(&self) -> usize {
        self.n_patch() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.embed_dim == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return bad("depth, embed_dim and grid must be positive".into());
        }
        if self.in_dim == 0 || self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("in_dim, num_classes and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        Ok(())
    }
}

/// Target keep ratios and the blocks they precede.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsificationSchedule {
    pub rho: f64,
    pub ratios: Vec<f64>,
    /// Zero-based index of the block each stage runs before.
    pub locations: Vec<usize>,
}

impl SparsificationSchedule {
    /// `[rho, rho^2, ..., rho^S]`.
    pub fn geometric(rho: f64, locations: &[usize]) -> Self {
        Self {
            rho,
            ratios: (1..=locations.len()).map(|s| rho.powi(s as i32)).collect(),
            locations: locations.to_vec(),
        }
    }

    pub fn stages(&self) -> usize {
        self.locations.len()
    }

    /// True when no stage removes anything; such a schedule is the identity.
    pub fn is_dense(&self) -> bool {
        self.ratios.iter().all(|&r| r >= 1.0)
    }

    /// Patch tokens kept after each stage.
    pub fn keep_counts(&self, n_patch: usize) -> Vec<usize> {
        self.ratios.iter().map(|&r| keep_count(r, n_patch)).collect()
    }

    pub fn validate(&self, depth: usize, n_patch: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ratios.len() != self.locations.len() {
            return bad("schedule ratios and locations differ in length".into());
        }
        if !self.locations.windows(2).all(|w| w[0] < w[1]) {
            return bad(format!("stage locations {:?} must be strictly increasing", self.locations));
        }
        if self.locations.iter().any(|&l| l >= depth) {
            return bad(format!("stage locations {:?} must be below depth {depth}", self.locations));
        }
        if self.ratios.iter().any(|&r| !(r > 0.0 && r <= 1.0)) {
            return bad(format!("keep ratios {:?} must lie in (0, 1]", self.ratios));
        }
        if !self.ratios.windows(2).all(|w| w[1] <= w[0]) {
            return bad(format!("keep ratios {:?} must be non-increasing", self.ratios));
        }
        if !self.is_dense() && self.keep_counts(n_patch).iter().any(|&m| m == 0) {
            return bad(format!("keep ratios {:?} leave no patch token of {n_patch}", self.ratios));
        }
        Ok(())
    }
}

/// How tokens are chosen at each stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// The prediction module.
    #[default]
    Learned,
    /// Uniformly random subsets of the surviving tokens.
    Random,
    /// Highest class-token attention in the preceding block.
    Attention,
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Policy::Learned),
            "random" => Ok(Policy::Random),
            "attention" => Ok(Policy::Attention),
            _ => Err(Error::Config(format!(
                "unknown policy `{s}` (expected learned, random or attention)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    fn new<T: Float>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cfg: &VitConfig,
    ) -> Result<Self> {
        let c = cfg.embed_dim;
        Ok(Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), c, Group::Backbone),
            attn: Attention::new(ps, rng, &format!("{name}.attn"), c, cfg.heads, Group::Backbone)?,
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), c, Group::Backbone),
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), c, cfg.mlp_ratio * c, Group::Backbone),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), cfg.mlp_ratio * c, c, Group::Backbone),
        })
    }

    /// Returns the block output and its attention probabilities.
    pub fn forward<T: Float>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        keep: Option<Var>,
    ) -> Result<(Var, Var)> {
        let h = self.ln1.forward(g, p, x)?;
        let a = self.attn.forward(g, p, h, keep)?;
        let x = g.add(x, a.out)?;
        let h = self.ln2.forward(g, p, x)?;
        let h = g.gelu(self.fc1.forward(g, p, h)?);
        let h = self.fc2.forward(g, p, h)?;
        Ok((g.add(x, h)?, a.probs))
    }
}

/// Everything the training objective needs from one forward pass.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// `[B, classes]`.
    pub logits: Var,
    /// Final normalised tokens `[B, N, C]`.
    pub tokens: Var,
    /// Keep state `[B, N]` after each stage.
    pub masks: Vec<Var>,
    /// Log drop/keep probabilities `[B, N, 2]` per stage (learned policy only).
    pub log_pi: Vec<Var>,
}

/// Options for [`VisionTransformer::forward_train`].
pub struct TrainOptions<'a, T> {
    pub policy: Policy,
    pub tau: f64,
    /// Per-stage decisions `[B, N]` to use instead of sampling.
    pub forced: Option<&'a [Tensor<T>]>,
    pub rng: &'a mut ChaCha8Rng,
}

/// Result of hard-pruned inference.
#[derive(Debug, Clone)]
pub struct InferOutput<T> {
    pub logits: Tensor<T>,
    /// `kept[s][b]`: ascending patch indices (0-based, class token excluded)
    /// surviving stage `s` for sample `b`.
    pub kept: Vec<Vec<Vec<usize>>>,
    /// `scores[s]`: `[B, N_patch]` keep score of each patch at stage `s`
    /// (zero for patches already removed).
    pub scores: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct VisionTransformer {
    pub cfg: VitConfig,
    pub patch: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head: Linear,
    pub predictors: Vec<Predictor>,
}

impl VisionTransformer {
    /// Builds a model with one prediction module per stage.
    pub fn new<T: Float>(
        ps: &mut ParamStore<T>,
        rng: &mut impl Rng,
        cfg: &VitConfig,
        stages: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let patch = Linear::new(ps, rng, "patch", cfg.in_dim, c, Group::Backbone);
        let cls = ps.add("cls", normal(rng, &[1, c], 0.02), Group::Backbone);
        let pos = ps.add("pos", normal(rng, &[cfg.n_tokens(), c], 0.02), Group::Backbone);
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(ps, rng, &format!("block{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(ps, "norm", c, Group::Backbone);
        let head = Linear::new(ps, rng, "head", c, cfg.num_classes, Group::Backbone);
        let predictors = (0..stages)
            .map(|s| Predictor::new(ps, rng, &format!("predictor{s}"), c, Group::Predictor))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            cls,
            pos,
            blocks,
            norm,
            head,
            predictors,
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 3 || shape[1] != self.cfg.n_patch() || shape[2] != self.cfg.in_dim {
            return Err(Error::shape(
                "vit input",
                shape,
                &[self.cfg.n_patch(), self.cfg.in_dim],
            ));
        }
        Ok(shape[0])
    }

    fn check_schedule(&self, sched: &SparsificationSchedule) -> Result<()> {
        sched.validate(self.cfg.depth, self.cfg.n_patch())?;
        if !sched.is_dense() && sched.stages() > self.predictors.len() {
            return Err(Error::Config(format!(
                "schedule has {} stages but the model has {} prediction modules",
                sched.stages(),
                self.predictors.len()
            )));
        }
        Ok(())
    }

    /// Patch embedding, class token and positional embedding: `[B, N, C]`.
    pub fn embed<T: Float>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let b = self.check_input(&g.shape(x))?;
        let t = self.patch.forward(g, p, x)?;
        let cls = g.broadcast_axis(p.var(self.cls), 0, b)?;
        let t = g.concat(&[cls, t], 1)?;
        let pos = g.broadcast_axis(p.var(self.pos), 0, b)?;
        g.add(t, pos)
    }

    /// Final norm and classifier on the class token.
    fn head_forward<T: Float>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let shape = g.shape(x);
        let tokens = self.norm.forward(g, p, x)?;
        let cls = g.narrow(tokens, 1, 0, 1)?;
        let cls = g.reshape(cls, &[shape[0], shape[2]])?;
        Ok((self.head.forward(g, p, cls)?, tokens))
    }

    /// Constant-shape forward pass. A dense schedule skips every stage.
    pub fn forward_train<T: Float>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        sched: &SparsificationSchedule,
        opts: &mut TrainOptions<'_, T>,
    ) -> Result<TrainOutput> {
        self.check_schedule(sched)?;
        let b = self.check_input(&g.shape(x))?;
        let n = self.cfg.n_tokens();
        let sparse = !sched.is_dense();
        let counts = sched.keep_counts(self.cfg.n_patch());
        if let Some(f) = opts.forced {
            if f.len() != sched.stages() || f.iter().any(|t| t.shape() != [b, n]) {
                return Err(Error::invalid("forward_train", "forced decisions must be [B, N] per stage"));
            }
        }

        let mut x = self.embed(g, p, x)?;
        let mut d_hat: Option<Var> = None;
        let mut last_probs: Option<Var> = None;
        let mut masks = Vec::new();
        let mut log_pi = Vec::new();
        let mut stage = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            if sparse && stage < sched.stages() && sched.locations[stage] == i {
                check_stage(g, x, stage)?;
                let cur = match d_hat {
                    Some(d) => d,
                    None => g.constant(Tensor::ones(&[b, n])),
                };
                let decision = if let Some(f) = opts.forced {
                    g.constant(f[stage].clone())
                } else {
                    match opts.policy {
                        Policy::Learned => {
                            let lp = self.predictors[stage].log_probs(g, p, x, cur)?;
                            log_pi.push(lp);
                            gumbel_sample(g, lp, opts.tau, opts.rng)?
                        }
                        Policy::Random => {
                            let keep = g.value(cur);
                            g.constant(random_decision(&keep, counts[stage], opts.rng))
                        }
                        Policy::Attention => {
                            let probs = last_probs.ok_or_else(|| {
                                Error::Config("attention policy needs a block before the first stage".into())
                            })?;
                            let score = class_attention(&g.value(probs));
                            g.constant(top_decision(&g.value(cur), &score, counts[stage]))
                        }
                    }
                };
                let next = update_mask(g, cur, decision)?;
                masks.push(next);
                d_hat = Some(next);
                stage += 1;
            }
            let (y, probs) = block.forward(g, p, x, d_hat)?;
            x = y;
            last_probs = Some(probs);
        }
        check_stage(g, x, stage)?;
        let (logits, tokens) = self.head_forward(g, p, x)?;
        if !g.with_value(logits, |t| t.is_finite()) {
            return Err(Error::Divergence { stage });
        }
        Ok(TrainOutput {
            logits,
            tokens,
            masks,
            log_pi,
        })
    }

    /// Hard token dropping. Every sample keeps exactly the scheduled count of
    /// patch tokens at each stage.
    pub fn forward_infer<T: Float>(
        &self,
        ps: &ParamStore<T>,
        input: &Tensor<T>,
        sched: &SparsificationSchedule,
        policy: Policy,
        rng: &mut ChaCha8Rng,
    ) -> Result<InferOutput<T>> {
        self.check_schedule(sched)?;
        let b = self.check_input(input.shape())?;
        let np = self.cfg.n_patch();
        let c = self.cfg.embed_dim;
        let counts = sched.keep_counts(np);
        let sparse = !sched.is_dense();

        let g = Graph::new();
        let p = ps.bind(&g, |_| false);
        let xin = g.constant(input.clone());
        let mut x = self.embed(&g, &p, xin)?;
        let mut alive: Vec<Vec<usize>> = vec![(0..np).collect(); b];
        let mut last_probs: Option<Var> = None;
        let mut kept = Vec::new();
        let mut scores = Vec::new();
        let mut stage = 0;
        for (i, block) in self.blocks.iter().enumerate() {
            if sparse && stage < sched.stages() && sched.locations[stage] == i {
                let n = g.shape(x)[1];
                let per_token: Vec<T> = match policy {
                    Policy::Learned => {
                        let ones = g.constant(Tensor::ones(&[b, n]));
                        let lp = self.predictors[stage].log_probs(&g, &p, x, ones)?;
                        g.with_value(lp, |t| t.data().chunks(2).map(|r| r[1].exp()).collect())
                    }
                    Policy::Random => (0..b * n).map(|_| crate::tensor::cast(rng.gen::<f64>())).collect(),
                    Policy::Attention => {
                        let probs = last_probs.ok_or_else(|| {
                            Error::Config("attention policy needs a block before the first stage".into())
                        })?;
                        class_attention(&g.value(probs)).into_data()
                    }
                };
                let m = counts[stage];
                let mut stage_scores = vec![T::zero(); b * np];
                let mut rows = Vec::with_capacity(b * (m + 1));
                let mut stage_kept = Vec::with_capacity(b);
                for bi in 0..b {
                    let s = &per_token[bi * n + 1..(bi + 1) * n];
                    for (j, &orig) in alive[bi].iter().enumerate() {
                        stage_scores[bi * np + orig] = s[j];
                    }
                    let mut local = topk_select(s, m)?;
                    local.sort_unstable();
                    rows.push(bi * n);
                    rows.extend(local.iter().map(|&l| bi * n + l + 1));
                    alive[bi] = local.iter().map(|&l| alive[bi][l]).collect();
                    stage_kept.push(alive[bi].clone());
                }
                let flat = g.reshape(x, &[b * n, c])?;
                let sel = g.gather_rows(flat, &rows)?;
                x = g.reshape(sel, &[b, m + 1, c])?;
                kept.push(stage_kept);
                scores.push(Tensor::new(vec![b, np], stage_scores)?);
                stage += 1;
            }
            let (y, probs) = block.forward(&g, &p, x, None)?;
            x = y;
            last_probs = Some(probs);
        }
        let (logits, _) = self.head_forward(&g, &p, x)?;
        Ok(InferOutput {
            logits: g.value(logits),
            kept,
            scores,
        })
    }

    /// Dense model with 2x2 average pooling of the patch grid after the
    /// middle block (after block 6 of 12).
    pub fn structural_downsample_baseline<T: Float>(
        &self,
        ps: &ParamStore<T>,
        input: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (h, w) = (self.cfg.grid_h, self.cfg.grid_w);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(
                "structural_downsample_baseline",
                format!("grid {h}x{w} must have even sides"),
            ));
        }
        self.check_input(input.shape())?;
        let g = Graph::new();
        let p = ps.bind(&g, |_| false);
        let xin = g.constant(input.clone());
        let mut x = self.embed(&g, &p, xin)?;
        let pool_after = self.cfg.depth / 2;
        for (i, block) in self.blocks.iter().enumerate() {
            if i == pool_after {
                x = pool_tokens(&g, x, h, w)?;
            }
            x = block.forward(&g, &p, x, None)?.0;
        }
        let (logits, _) = self.head_forward(&g, &p, x)?;
        Ok(g.value(logits))
    }
}

/// 2x2 average pooling of the patch grid, class token passed through.
pub fn pool_tokens<T: Float>(g: &Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x);
    let (b, n, c) = (s[0], s[1], s[2]);
    if n != h * w + 1 {
        return Err(Error::shape("pool_tokens", &s, &[h * w + 1]));
    }
    let cls = g.narrow(x, 1, 0, 1)?;
    let grid = g.narrow(x, 1, 1, h * w)?;
    let grid = g.reshape(grid, &[b, h, w, c])?;
    let pooled = g.avg_pool_2d(grid, 2)?;
    let pooled = g.reshape(pooled, &[b, (h / 2) * (w / 2), c])?;
    g.concat(&[cls, pooled], 1)
}

fn check_stage<T: Float>(g: &Graph<T>, x: Var, stage: usize) -> Result<()> {
    if g.with_value(x, |t| t.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { stage })
    }
}

/// Keeps `m` uniformly chosen patch tokens among those alive in `keep: [B, N]`.
pub fn random_decision<T: Float>(keep: &Tensor<T>, m: usize, rng: &mut impl Rng) -> Tensor<T> {
    let n = keep.last_dim();
    let mut out = Tensor::zeros(keep.shape());
    for (krow, orow) in keep.data().chunks(n).zip(out.data_mut().chunks_mut(n)) {
        orow[0] = T::one();
        let alive: Vec<usize> = (1..n).filter(|&j| krow[j] > T::zero()).collect();
        let take = m.min(alive.len());
        for i in sample(rng, alive.len(), take) {
            orow[alive[i]] = T::one();
        }
    }
    out
}

/// Keeps the `m` alive patch tokens with the highest `score`.
pub fn top_decision<T: Float>(keep: &Tensor<T>, score: &Tensor<T>, m: usize) -> Tensor<T> {
    let n = keep.last_dim();
    let mut out = Tensor::zeros(keep.shape());
    for ((krow, srow), orow) in keep
        .data()
        .chunks(n)
        .zip(score.data().chunks(n))
        .zip(out.data_mut().chunks_mut(n))
    {
        orow[0] = T::one();
        let masked: Vec<T> = (1..n)
            .map(|j| if krow[j] > T::zero() { srow[j] } else { T::neg_infinity() })
            .collect();
        let alive = masked.iter().filter(|v| v.is_finite()).count();
        if let Ok(top) = topk_select(&masked, m.min(alive).max(1)) {
            for j in top {
                if masked[j].is_finite() {
                    orow[j + 1] = T::one();
                }
            }
        }
    }
    out
}

/// Per-stage decisions `[B, N]` equivalent to the selections of an inference
/// run, for replaying them through [`VisionTransformer::forward_train`].
pub fn decisions_from_kept<T: Float>(kept: &[Vec<Vec<usize>>], n_patch: usize) -> Vec<Tensor<T>> {
    kept.iter()
        .map(|stage| {
            let b = stage.len();
            let mut t = Tensor::zeros(&[b, n_patch + 1]);
            for (bi, idx) in stage.iter().enumerate() {
                t.data_mut()[bi * (n_patch + 1)] = T::one();
                for &j in idx {
                    t.data_mut()[bi * (n_patch + 1) + j + 1] = T::one();
                }
            }
            t
        })
        .collect()
}
