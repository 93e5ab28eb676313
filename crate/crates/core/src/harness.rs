//! Run configuration, training loops, evaluation, benchmarking and heatmaps.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::{precision_at_m, Batch, Synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::flops::{flops_hier, flops_vit, FlopsReport, HierFlopsModel, VitFlopsModel};
use crate::hier::{FastPathKind, HierConfig, HierModel, HierSchedule};
use crate::losses::{objective, DistillTarget, LossValues, LossWeights, TeacherOutputs};
use crate::nn::{AdamW, CosineSchedule, Group, ParamStore};
use crate::tensor::{Float, Tensor};
use crate::vit::{Policy, SparsificationSchedule, TrainOptions, VisionTransformer, VitConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pipeline {
    #[default]
    Vit,
    Hier,
}

impl std::str::FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(Pipeline::Vit),
            "hier" => Ok(Pipeline::Hier),
            _ => Err(Error::Config(format!("unknown pipeline `{s}` (expected vit or hier)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Step size of predictors and fast paths.
    pub lr: f64,
    /// Backbone step size as a multiple of `lr`.
    pub backbone_lr_mult: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Leading epochs during which the backbone is frozen.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub lr_warmup_steps: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            backbone_lr_mult: 0.01,
            weight_decay: 0.05,
            epochs: 30,
            warmup_epochs: 1,
            batch_size: 32,
            steps_per_epoch: 12,
            lr_warmup_steps: 12,
            tau: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            weight_decay: 0.05,
        }
    }
}

/// Everything that determines a run. A saved config plus its seed reproduces
/// the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    pub seed: u64,
    pub rho: f64,
    pub policy: Policy,
    pub fast_path: FastPathKind,
    pub vit: VitConfig,
    /// Zero-based blocks before which tokens are pruned.
    pub locations: Vec<usize>,
    pub hier: HierConfig,
    pub hier_stage: usize,
    /// Defaults to `[k, 2k, 3k]` with `k = depth / 9`.
    pub hier_layers: Option<Vec<usize>>,
    /// Defaults per pipeline.
    pub loss: Option<LossWeights>,
    pub optim: OptimConfig,
    pub teacher: TeacherConfig,
    /// Defaults per pipeline.
    pub data: Option<SyntheticSpec>,
    pub data_seed: u64,
    pub eval_size: usize,
    pub eval_seed: u64,
    /// Directory receiving checkpoints, metrics and reports.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Vit,
            seed: 0,
            rho: 0.7,
            policy: Policy::Learned,
            fast_path: FastPathKind::Linear,
            vit: VitConfig::tiny_d6(16, 4),
            locations: vec![1, 3, 4],
            hier: HierConfig::tiny(16, 4),
            hier_stage: 2,
            hier_layers: None,
            loss: None,
            optim: OptimConfig::default(),
            teacher: TeacherConfig::default(),
            data: None,
            data_seed: 1234,
            eval_size: 256,
            eval_seed: 4321,
            out: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn for_pipeline(pipeline: Pipeline) -> Self {
        let mut c = Self {
            pipeline,
            ..Self::default()
        };
        if pipeline == Pipeline::Hier {
            c.rho = 0.9;
            c.optim.backbone_lr_mult = 0.2;
        }
        c
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.loss.unwrap_or(match self.pipeline {
            Pipeline::Vit => LossWeights::vit(),
            Pipeline::Hier => LossWeights::hier(),
        })
    }

    pub fn data_spec(&self) -> SyntheticSpec {
        self.data.clone().unwrap_or(match self.pipeline {
            Pipeline::Vit => SyntheticSpec::vit(),
            Pipeline::Hier => SyntheticSpec::hier(),
        })
    }

    pub fn vit_schedule(&self) -> SparsificationSchedule {
        SparsificationSchedule::geometric(self.rho, &self.locations)
    }

    pub fn hier_schedule(&self) -> HierSchedule {
        let mut s = HierSchedule::arithmetic(self.rho, self.hier_stage, self.hier.depths.get(self.hier_stage).copied().unwrap_or(0));
        if let Some(layers) = &self.hier_layers {
            s.layers = layers.clone();
            s.ratios = (0..layers.len()).map(|i| self.rho - 0.2 * i as f64).collect();
        }
        if self.rho >= 1.0 {
            s.ratios = vec![1.0; s.layers.len()];
        }
        s
    }

    /// Number of scheduled decisions.
    pub fn stages(&self) -> usize {
        match self.pipeline {
            Pipeline::Vit => self.locations.len(),
            Pipeline::Hier => self.hier_schedule().layers.len(),
        }
    }

    /// Cells per decision map: patches for the token pipeline, locations of
    /// the sparsified stage for the hierarchical one.
    pub fn decision_cells(&self) -> usize {
        match self.pipeline {
            Pipeline::Vit => self.vit.n_patch(),
            Pipeline::Hier => self.hier.side(self.hier_stage).pow(2),
        }
    }

    /// Side of the decision map.
    pub fn decision_side(&self) -> (usize, usize) {
        match self.pipeline {
            Pipeline::Vit => (self.vit.grid_h, self.vit.grid_w),
            Pipeline::Hier => (self.hier.side(self.hier_stage), self.hier.side(self.hier_stage)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let data = self.data_spec();
        data.validate()?;
        self.loss_weights().validate()?;
        let o = &self.optim;
        if o.batch_size == 0 || o.steps_per_epoch == 0 {
            return bad("batch_size and steps_per_epoch must be positive".into());
        }
        if !(o.lr > 0.0 && o.backbone_lr_mult >= 0.0 && o.tau > 0.0 && self.teacher.lr > 0.0) {
            return bad("learning rates and temperature must be positive".into());
        }
        if o.warmup_epochs > o.epochs {
            return bad(format!("warmup_epochs {} exceed epochs {}", o.warmup_epochs, o.epochs));
        }
        if self.eval_size == 0 {
            return bad("eval_size must be positive".into());
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho {} must lie in (0, 1]", self.rho));
        }
        match self.pipeline {
            Pipeline::Vit => {
                self.vit.validate()?;
                self.vit_schedule().validate(self.vit.depth, self.vit.n_patch())?;
                if (self.vit.grid_h, self.vit.grid_w) != (data.grid, data.grid)
                    || self.vit.in_dim != data.dim
                    || self.vit.num_classes != data.classes
                {
                    return bad("vit grid, in_dim and num_classes must match the dataset".into());
                }
                if self.policy == Policy::Attention && self.locations.first() == Some(&0) {
                    return bad("the attention policy needs a block before the first stage".into());
                }
            }
            Pipeline::Hier => {
                self.hier.validate()?;
                self.hier_schedule().validate(&self.hier)?;
                if self.hier.grid != data.grid || self.hier.in_dim != data.dim || self.hier.num_classes != data.classes {
                    return bad("hier grid, in_dim and num_classes must match the dataset".into());
                }
                if self.policy == Policy::Attention {
                    return bad("the attention policy needs an attention mixer; use learned or random".into());
                }
            }
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(stream);
        r
    }

    pub fn synthetic(&self) -> Result<Synthetic> {
        Synthetic::new(self.data_spec(), self.data_seed)
    }
}

const INIT_STREAM: u64 = 0;
const DATA_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;
const TEACHER_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

#[derive(Debug, Clone)]
pub enum Model {
    Vit(VisionTransformer),
    Hier(HierModel),
}

/// Per-sample outcome of hard inference.
#[derive(Debug, Clone)]
pub struct InferResult<T> {
    pub logits: Tensor<T>,
    /// `kept[s][b]`: ascending decision cells kept at stage `s`.
    pub kept: Vec<Vec<Vec<usize>>>,
}

struct StepOut {
    logits: Var,
    features: Var,
    masks: Vec<Var>,
    distill: DistillTarget,
    skip: usize,
}

impl Model {
    /// Builds freshly initialised parameters from the config seed.
    pub fn build<T: Float>(cfg: &RunConfig) -> Result<(ParamStore<T>, Model)> {
        cfg.validate()?;
        let mut rng = cfg.rng(INIT_STREAM);
        let mut ps = ParamStore::new();
        let model = match cfg.pipeline {
            Pipeline::Vit => Model::Vit(VisionTransformer::new(&mut ps, &mut rng, &cfg.vit, cfg.locations.len())?),
            Pipeline::Hier => Model::Hier(HierModel::new(
                &mut ps,
                &mut rng,
                &cfg.hier,
                &cfg.hier_schedule(),
                cfg.fast_path,
            )?),
        };
        Ok((ps, model))
    }

    #[allow(clippy::too_many_arguments)]
    fn train_forward<T: Float>(
        &self,
        g: &Graph<T>,
        p: &crate::nn::Bound,
        x: Var,
        cfg: &RunConfig,
        dense: bool,
        policy: Policy,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOut> {
        match self {
            Model::Vit(m) => {
                let sched = if dense {
                    SparsificationSchedule::geometric(1.0, &cfg.locations)
                } else {
                    cfg.vit_schedule()
                };
                let mut opts = TrainOptions {
                    policy,
                    tau: cfg.optim.tau,
                    forced: None,
                    rng,
                };
                let out = m.forward_train(g, p, x, &sched, &mut opts)?;
                let distill = match out.masks.last() {
                    Some(&mask) => DistillTarget::Tokens(mask),
                    None => DistillTarget::Dense,
                };
                Ok(StepOut {
                    logits: out.logits,
                    features: out.tokens,
                    masks: out.masks,
                    distill,
                    skip: 1,
                })
            }
            Model::Hier(m) => {
                let mut sched = cfg.hier_schedule();
                if dense {
                    sched.ratios = vec![1.0; sched.layers.len()];
                }
                let out = m.forward_train(g, p, x, &sched, policy, cfg.optim.tau, None, rng)?;
                Ok(StepOut {
                    logits: out.logits,
                    features: out.features,
                    masks: out.masks,
                    distill: DistillTarget::Dense,
                    skip: 0,
                })
            }
        }
    }

    /// Hard inference. `dense` disables every decision.
    pub fn infer<T: Float>(
        &self,
        ps: &ParamStore<T>,
        x: &Tensor<T>,
        cfg: &RunConfig,
        dense: bool,
        policy: Policy,
        rng: &mut ChaCha8Rng,
    ) -> Result<InferResult<T>> {
        match self {
            Model::Vit(m) => {
                let sched = if dense {
                    SparsificationSchedule::geometric(1.0, &cfg.locations)
                } else {
                    cfg.vit_schedule()
                };
                let out = m.forward_infer(ps, x, &sched, policy, rng)?;
                Ok(InferResult {
                    logits: out.logits,
                    kept: out.kept,
                })
            }
            Model::Hier(m) => {
                let mut sched = cfg.hier_schedule();
                if dense {
                    sched.ratios = vec![1.0; sched.layers.len()];
                }
                let out = m.forward_infer(ps, x, &sched, policy, rng)?;
                Ok(InferResult {
                    logits: out.logits,
                    kept: out.kept,
                })
            }
        }
    }

    /// Dense outputs used as distillation targets.
    pub fn teacher_outputs<T: Float>(&self, ps: &ParamStore<T>, x: &Tensor<T>, cfg: &RunConfig) -> Result<TeacherOutputs<T>> {
        let g = Graph::new();
        let p = ps.bind(&g, |_| false);
        let xv = g.constant(x.clone());
        let mut rng = cfg.rng(TEACHER_STREAM);
        let out = self.train_forward(&g, &p, xv, cfg, true, Policy::Learned, &mut rng)?;
        let probs = g.softmax(out.logits);
        Ok(TeacherOutputs {
            features: g.value(out.features),
            probs: g.value(probs),
        })
    }

    /// Analytic per-sample cost under the config's schedule.
    pub fn flops(&self, cfg: &RunConfig, dense: bool) -> Result<FlopsReport> {
        match self {
            Model::Vit(_) => {
                let m = VitFlopsModel {
                    name: "run".into(),
                    cfg: cfg.vit.clone(),
                    stem: vec![],
                    locations: cfg.locations.clone(),
                };
                let rho = if dense { 1.0 } else { cfg.rho };
                flops_vit(&m, &m.schedule(rho))
            }
            Model::Hier(_) => {
                let m = HierFlopsModel {
                    name: "run".into(),
                    cfg: cfg.hier.clone(),
                };
                let mut s = cfg.hier_schedule();
                if dense {
                    s.ratios = vec![1.0; s.layers.len()];
                }
                flops_hier(&m, &s, cfg.fast_path)
            }
        }
    }
}

fn argmax_accuracy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count()
}

/// Metrics of one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossValues,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// Mean realised keep fraction of the hard training decisions per stage.
    pub keep: Vec<f64>,
    /// Precision of the last stage's kept cells at evaluation.
    pub precision: f64,
}

fn write_metrics(path: &Path, rows: &[EpochMetrics], stages: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = ["epoch", "loss", "cls", "kl", "distill", "ratio", "train_acc", "eval_acc"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..stages).map(|s| format!("keep_{s}")));
    header.push("precision".into());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            r.epoch.to_string(),
            format!("{:.6}", r.loss.total),
            format!("{:.6}", r.loss.cls),
            format!("{:.6}", r.loss.kl),
            format!("{:.6}", r.loss.distill),
            format!("{:.6}", r.loss.ratio),
            format!("{:.4}", r.train_acc),
            format!("{:.4}", r.eval_acc),
        ];
        rec.extend((0..stages).map(|s| format!("{:.4}", r.keep.get(s).copied().unwrap_or(1.0))));
        rec.push(format!("{:.4}", r.precision));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Mean over batch of the kept fraction of decision cells in each mask.
fn keep_fractions<T: Float>(g: &Graph<T>, masks: &[Var], skip: usize) -> Vec<f64> {
    masks
        .iter()
        .map(|&m| {
            g.with_value(m, |t| {
                let n = t.last_dim();
                let kept: f64 = t
                    .data()
                    .chunks(n)
                    .map(|row| row[skip..].iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>())
                    .sum();
                kept / ((n - skip) * (t.len() / n)) as f64
            })
        })
        .collect()
}

/// State carried through a training run.
pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub model: Model,
    pub ps: ParamStore<f32>,
    pub teacher: Option<ParamStore<f32>>,
    data: Synthetic,
    eval: Vec<Batch<f32>>,
}

/// Outcome of [`Trainer::fit`].
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub epochs: Vec<EpochMetrics>,
    pub final_eval: EvalReport,
}

impl<'a> Trainer<'a> {
    /// Fresh model; `teacher` holds dense backbone weights that initialise
    /// the student and provide distillation targets.
    pub fn new(cfg: &'a RunConfig, teacher: Option<&Checkpoint<f32>>) -> Result<Self> {
        let (mut ps, model) = Model::build::<f32>(cfg)?;
        let teacher_ps = match teacher {
            Some(ck) => {
                ps.load_group(&ck.tensors, Group::Backbone)?;
                Some(ps.clone())
            }
            None => None,
        };
        let data = cfg.synthetic()?;
        let eval = data.eval_set(cfg.eval_seed, cfg.eval_size, cfg.optim.batch_size.max(64));
        Ok(Self {
            cfg,
            model,
            ps,
            teacher: teacher_ps,
            data,
            eval,
        })
    }

    /// Dense training of the backbone with cross-entropy only.
    pub fn fit_teacher(&mut self) -> Result<FitSummary> {
        let cfg = self.cfg;
        let weights = LossWeights {
            kl: 0.0,
            distill: 0.0,
            ratio: 0.0,
        };
        let sched = CosineSchedule {
            base: cfg.teacher.lr,
            warmup_steps: cfg.optim.lr_warmup_steps,
            total_steps: cfg.teacher.epochs * cfg.optim.steps_per_epoch,
        };
        let mut opt = AdamW::new(cfg.teacher.weight_decay);
        self.run(cfg.teacher.epochs, true, weights, &mut opt, |step, _epoch, grp| match grp {
            Group::Backbone => Some(sched.lr(step)),
            _ => None,
        })
    }

    /// Sparsified fine-tuning with the full objective.
    pub fn fit(&mut self) -> Result<FitSummary> {
        let cfg = self.cfg;
        let o = &cfg.optim;
        let sched = CosineSchedule {
            base: o.lr,
            warmup_steps: o.lr_warmup_steps,
            total_steps: o.epochs * o.steps_per_epoch,
        };
        let mut opt = AdamW::new(o.weight_decay);
        let mult = o.backbone_lr_mult;
        let warm = o.warmup_epochs;
        self.run(o.epochs, false, cfg.loss_weights(), &mut opt, move |step, epoch, grp| {
            let lr = sched.lr(step);
            match grp {
                Group::Backbone if epoch < warm || mult == 0.0 => None,
                Group::Backbone => Some(lr * mult),
                _ => Some(lr),
            }
        })
    }

    fn run(
        &mut self,
        epochs: usize,
        dense: bool,
        weights: LossWeights,
        opt: &mut AdamW<f32>,
        lr: impl Fn(usize, usize, Group) -> Option<f64>,
    ) -> Result<FitSummary> {
        let cfg = self.cfg;
        let mut data_rng = cfg.rng(DATA_STREAM);
        let mut sample_rng = cfg.rng(SAMPLE_STREAM);
        let targets: Vec<f64> = match cfg.pipeline {
            Pipeline::Vit => cfg.vit_schedule().ratios,
            Pipeline::Hier => cfg.hier_schedule().ratios,
        };
        let policy = if dense { Policy::Learned } else { cfg.policy };
        let mut rows = Vec::new();
        let mut step = 0;
        for epoch in 0..epochs {
            let mut sum = LossValues::default();
            let mut correct = 0;
            let mut seen = 0;
            let mut keep = vec![0.0; cfg.stages()];
            let mut keep_batches = 0;
            for _ in 0..cfg.optim.steps_per_epoch {
                let batch = self.data.batch::<f32>(&mut data_rng, cfg.optim.batch_size);
                let teacher = match (&self.teacher, dense) {
                    (Some(t), false) => Some(self.model.teacher_outputs(t, &batch.x, cfg)?),
                    _ => None,
                };
                let g = Graph::new();
                let p = self.ps.bind(&g, |grp| lr(step, epoch, grp).is_some());
                let x = g.constant(batch.x.clone());
                let out = self.model.train_forward(&g, &p, x, cfg, dense, policy, &mut sample_rng)?;
                let (total, parts) = objective(
                    &g,
                    out.logits,
                    out.features,
                    &batch.labels,
                    teacher.as_ref(),
                    out.distill,
                    &out.masks,
                    &targets,
                    out.skip,
                    &weights,
                )?;
                let vals = LossValues::read(&g, total, &parts);
                if !vals.total.is_finite() {
                    return Err(Error::Divergence { stage: out.masks.len() });
                }
                let grads = g.backward(total)?;
                opt.step(&mut self.ps, &p, &grads, |grp| lr(step, epoch, grp).unwrap_or(0.0));
                step += 1;
                sum.total += vals.total;
                sum.cls += vals.cls;
                sum.kl += vals.kl;
                sum.distill += vals.distill;
                sum.ratio += vals.ratio;
                correct += g.with_value(out.logits, |l| argmax_accuracy(l, &batch.labels));
                seen += batch.len();
                if !out.masks.is_empty() {
                    for (k, f) in keep.iter_mut().zip(keep_fractions(&g, &out.masks, out.skip)) {
                        *k += f;
                    }
                    keep_batches += 1;
                }
            }
            let n = cfg.optim.steps_per_epoch as f64;
            let eval = self.evaluate(dense, policy, false)?;
            rows.push(EpochMetrics {
                epoch,
                loss: LossValues {
                    total: sum.total / n,
                    cls: sum.cls / n,
                    kl: sum.kl / n,
                    distill: sum.distill / n,
                    ratio: sum.ratio / n,
                },
                train_acc: correct as f64 / seen as f64,
                eval_acc: eval.accuracy,
                keep: if keep_batches > 0 {
                    keep.iter().map(|k| k / keep_batches as f64).collect()
                } else {
                    vec![1.0; cfg.stages()]
                },
                precision: eval.precision.last().copied().unwrap_or(0.0),
            });
        }
        let final_eval = self.evaluate(dense, policy, true)?;
        Ok(FitSummary {
            epochs: rows,
            final_eval,
        })
    }

    /// Accuracy and selection quality on the fixed evaluation set.
    pub fn evaluate(&self, dense: bool, policy: Policy, with_random: bool) -> Result<EvalReport> {
        evaluate(self.cfg, &self.model, &self.ps, &self.eval, dense, policy, with_random)
    }

    pub fn checkpoint(&self, role: &str, group: Option<Group>) -> Result<Checkpoint<f32>> {
        let tensors = match group {
            Some(g) => self.ps.group_map(g),
            None => self.ps.to_map(),
        };
        Ok(Checkpoint::new(
            serde_json::json!({ "role": role, "config": serde_json::to_value(self.cfg)? }),
            tensors,
        ))
    }
}

/// Result of [`evaluate`].
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Kept fraction of decision cells per stage.
    pub keep_ratios: Vec<f64>,
    /// Fraction of kept cells that are informative, per stage.
    pub precision: Vec<f64>,
    /// The same for uniformly random selections of equal size (empty unless
    /// requested).
    pub random_precision: Vec<f64>,
    /// Informative fraction of all decision cells (the expected precision of
    /// a random selection).
    pub base_rate: f64,
    #[serde(skip)]
    pub kept: Vec<Vec<Vec<usize>>>,
    #[serde(skip)]
    pub informative: Vec<Vec<bool>>,
}

/// Marks a decision cell informative when any input cell it covers is.
pub fn coarsen_informative(inf: &[bool], grid: usize, factor: usize) -> Vec<bool> {
    if factor <= 1 {
        return inf.to_vec();
    }
    let side = grid / factor;
    let mut out = vec![false; side * side];
    for (i, &v) in inf.iter().enumerate() {
        if v {
            out[(i / grid / factor) * side + (i % grid) / factor] = true;
        }
    }
    out
}

fn decision_informative(cfg: &RunConfig, inf: &[bool]) -> Vec<bool> {
    match cfg.pipeline {
        Pipeline::Vit => inf.to_vec(),
        Pipeline::Hier => coarsen_informative(inf, cfg.hier.grid, 1 << cfg.hier_stage),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cfg: &RunConfig,
    model: &Model,
    ps: &ParamStore<f32>,
    eval: &[Batch<f32>],
    dense: bool,
    policy: Policy,
    with_random: bool,
) -> Result<EvalReport> {
    let stages = cfg.stages();
    let cells = cfg.decision_cells();
    let mut rng = cfg.rng(EVAL_STREAM);
    let mut correct = 0;
    let mut total = 0;
    let mut kept: Vec<Vec<Vec<usize>>> = vec![Vec::new(); stages];
    let mut random_kept: Vec<Vec<Vec<usize>>> = vec![Vec::new(); stages];
    let mut informative = Vec::new();
    for batch in eval {
        let r = model.infer(ps, &batch.x, cfg, dense, policy, &mut rng)?;
        correct += argmax_accuracy(&r.logits, &batch.labels);
        total += batch.len();
        for s in 0..stages {
            match r.kept.get(s) {
                Some(k) => kept[s].extend(k.iter().cloned()),
                None => kept[s].extend((0..batch.len()).map(|_| (0..cells).collect())),
            }
        }
        if with_random && !dense {
            let rr = model.infer(ps, &batch.x, cfg, false, Policy::Random, &mut rng)?;
            for (s, k) in rr.kept.into_iter().enumerate() {
                random_kept[s].extend(k);
            }
        }
        informative.extend(batch.informative.iter().map(|inf| decision_informative(cfg, inf)));
    }
    let keep_ratios = kept
        .iter()
        .map(|st| st.iter().map(|k| k.len()).sum::<usize>() as f64 / (st.len() * cells).max(1) as f64)
        .collect();
    let precision = kept.iter().map(|st| precision_at_m(st, &informative)).collect();
    let random_precision = if with_random && !dense {
        random_kept.iter().map(|st| precision_at_m(st, &informative)).collect()
    } else {
        Vec::new()
    };
    let base_rate = informative.iter().flatten().filter(|&&v| v).count() as f64 / (informative.len() * cells).max(1) as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / total.max(1) as f64,
        keep_ratios,
        precision,
        random_precision,
        base_rate,
        kept,
        informative,
    })
}

/// Teacher checkpoint location inside an output directory.
pub fn teacher_path(out: &Path) -> PathBuf {
    out.join("teacher.ckpt")
}

pub fn student_path(out: &Path) -> PathBuf {
    out.join("student.ckpt")
}

/// Trains the dense teacher and writes `teacher.ckpt`, `teacher_metrics.csv`
/// and `config.json` under `out`.
pub fn cmd_train_teacher(cfg: &RunConfig, out: &Path) -> Result<FitSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    let mut t = Trainer::new(cfg, None)?;
    let summary = t.fit_teacher()?;
    write_metrics(&out.join("teacher_metrics.csv"), &summary.epochs, 0)?;
    t.checkpoint("teacher", Some(Group::Backbone))?.save(&teacher_path(out))?;
    Ok(summary)
}

/// Fine-tunes a sparsified student from the teacher at `teacher`; writes
/// `student.ckpt` and `metrics.csv` under `out`.
pub fn cmd_train(cfg: &RunConfig, teacher: &Path, out: &Path) -> Result<FitSummary> {
    cfg.validate()?;
    if !teacher.exists() {
        return Err(Error::MissingTeacher {
            path: teacher.display().to_string(),
        });
    }
    let ck = Checkpoint::<f32>::load(teacher)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), cfg.to_json()?)?;
    let mut t = Trainer::new(cfg, Some(&ck))?;
    let summary = t.fit()?;
    write_metrics(&out.join("metrics.csv"), &summary.epochs, cfg.stages())?;
    t.checkpoint("student", None)?.save(&student_path(out))?;
    Ok(summary)
}

/// Restores a model from any checkpoint written by this harness. Teacher
/// checkpoints carry the backbone only; remaining groups keep their
/// initialisation.
pub fn load_model(cfg: &RunConfig, ck: &Checkpoint<f32>) -> Result<(ParamStore<f32>, Model)> {
    let (mut ps, model) = Model::build::<f32>(cfg)?;
    if ck.meta.get("role").and_then(|r| r.as_str()) == Some("teacher") {
        ps.load_group(&ck.tensors, Group::Backbone)?;
    } else {
        ps.load(&ck.tensors)?;
    }
    Ok((ps, model))
}

/// Config stored in a checkpoint's metadata.
pub fn checkpoint_config(ck: &Checkpoint<f32>) -> Result<RunConfig> {
    let v = ck
        .meta
        .get("config")
        .ok_or_else(|| Error::CorruptCheckpoint("metadata has no config".into()))?;
    Ok(serde_json::from_value(v.clone())?)
}

pub fn cmd_eval(cfg: &RunConfig, ck: &Checkpoint<f32>, dense: bool, out: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let (ps, model) = load_model(cfg, ck)?;
    let data = cfg.synthetic()?;
    let eval = data.eval_set(cfg.eval_seed, cfg.eval_size, 64);
    let report = evaluate(cfg, &model, &ps, &eval, dense, cfg.policy, true)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
        let mut w = csv::Writer::from_path(dir.join("kept.csv")).map_err(csv_err)?;
        w.write_record(["sample", "stage", "kept"]).map_err(csv_err)?;
        for (s, stage) in report.kept.iter().enumerate() {
            for (b, k) in stage.iter().enumerate() {
                let idx: Vec<String> = k.iter().map(|i| i.to_string()).collect();
                w.write_record([b.to_string(), s.to_string(), idx.join(" ")]).map_err(csv_err)?;
            }
        }
        w.flush()?;
    }
    Ok(report)
}

/// Throughput of one inference mode.
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub mode: String,
    pub median_samples_per_sec: f64,
    /// Median absolute deviation relative to the median.
    pub relative_spread: f64,
    pub gflops: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median throughput of dense and sparsified inference after `warmup` runs.
pub fn cmd_bench(
    cfg: &RunConfig,
    ps: &ParamStore<f32>,
    model: &Model,
    batch: usize,
    repeats: usize,
    warmup: usize,
) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    if repeats == 0 || batch == 0 {
        return Err(Error::Config("bench needs positive batch and repeats".into()));
    }
    let data = cfg.synthetic()?;
    let mut rng = cfg.rng(EVAL_STREAM);
    let x = data.batch::<f32>(&mut rng, batch).x;
    let mut rows = Vec::new();
    for (mode, dense) in [("dense", true), ("sparse", false)] {
        let mut rates = Vec::with_capacity(repeats);
        for i in 0..warmup + repeats {
            let t0 = Instant::now();
            model.infer(ps, &x, cfg, dense, cfg.policy, &mut rng)?;
            let dt = t0.elapsed().as_secs_f64();
            if i >= warmup {
                rates.push(batch as f64 / dt.max(1e-12));
            }
        }
        let med = median(&mut rates);
        let mut dev: Vec<f64> = rates.iter().map(|r| (r - med).abs()).collect();
        rows.push(BenchRow {
            mode: mode.into(),
            median_samples_per_sec: med,
            relative_spread: median(&mut dev) / med,
            gflops: model.flops(cfg, dense)?.gflops,
        });
    }
    Ok(rows)
}

/// Per-stage mean keep frequency, `[stages][cells]`.
pub fn keep_frequency(report: &EvalReport, cells: usize) -> Vec<Vec<f64>> {
    report
        .kept
        .iter()
        .map(|stage| {
            let mut f = vec![0.0; cells];
            for k in stage {
                for &i in k {
                    f[i] += 1.0;
                }
            }
            let n = stage.len().max(1) as f64;
            f.iter_mut().for_each(|v| *v /= n);
            f
        })
        .collect()
}

/// Binary P5 graymap of values in `[0, 1]`.
pub fn pgm(values: &[f64], w: usize, h: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Writes `heatmap_stage{s}.csv`/`.pgm` for every stage and per-sample
/// kept masks `sample{b}_stage{s}.pgm` for the first `samples` samples.
pub fn cmd_heatmap(cfg: &RunConfig, ck: &Checkpoint<f32>, out: &Path, samples: usize) -> Result<Vec<Vec<f64>>> {
    let report = cmd_eval(cfg, ck, cfg.rho >= 1.0, None)?;
    let (h, w) = cfg.decision_side();
    let freq = keep_frequency(&report, h * w);
    fs::create_dir_all(out)?;
    for (s, f) in freq.iter().enumerate() {
        let mut wtr = csv::Writer::from_path(out.join(format!("heatmap_stage{s}.csv"))).map_err(csv_err)?;
        for row in f.chunks(w) {
            wtr.write_record(row.iter().map(|v| format!("{v:.4}"))).map_err(csv_err)?;
        }
        wtr.flush()?;
        fs::write(out.join(format!("heatmap_stage{s}.pgm")), pgm(f, w, h))?;
    }
    for b in 0..samples.min(report.informative.len()) {
        for (s, stage) in report.kept.iter().enumerate() {
            let mut m = vec![0.0; h * w];
            stage[b].iter().for_each(|&i| m[i] = 1.0);
            fs::write(out.join(format!("sample{b}_stage{s}.pgm")), pgm(&m, w, h))?;
        }
    }
    Ok(freq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(pipeline: Pipeline) -> RunConfig {
        let mut c = RunConfig::for_pipeline(pipeline);
        c.optim.epochs = 1;
        c.optim.steps_per_epoch = 2;
        c.optim.batch_size = 4;
        c.optim.warmup_epochs = 0;
        c.teacher.epochs = 1;
        c.eval_size = 8;
        match pipeline {
            Pipeline::Vit => {
                c.vit.embed_dim = 16;
                c.vit.heads = 2;
            }
            Pipeline::Hier => {
                c.hier.widths = vec![8, 8, 16, 16];
            }
        }
        c
    }

    #[test]
    fn config_json_round_trip_and_validation() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let mut bad = RunConfig::default();
        bad.rho = 1.5;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut h = RunConfig::for_pipeline(Pipeline::Hier);
        assert_eq!(h.hier_schedule().layers, vec![1, 2, 3]);
        h.validate().unwrap();
        h.policy = Policy::Attention;
        assert!(h.validate().is_err());
    }

    #[test]
    fn tiny_runs_end_to_end() {
        for pipeline in [Pipeline::Vit, Pipeline::Hier] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = quick(pipeline);
            let err = cmd_train(&cfg, &teacher_path(dir.path()), dir.path()).unwrap_err();
            assert!(matches!(err, Error::MissingTeacher { .. }));
            cmd_train_teacher(&cfg, dir.path()).unwrap();
            let s = cmd_train(&cfg, &teacher_path(dir.path()), dir.path()).unwrap();
            assert_eq!(s.epochs.len(), 1);
            let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
            assert!(csv.starts_with("epoch,loss,cls,kl,distill,ratio,train_acc,eval_acc,keep_0"));
            let ck = Checkpoint::<f32>::load(&student_path(dir.path())).unwrap();
            let cfg2 = checkpoint_config(&ck).unwrap();
            assert_eq!(cfg2, cfg);
            let a = cmd_eval(&cfg, &ck, false, None).unwrap();
            let b = cmd_eval(&cfg, &ck, false, None).unwrap();
            assert_eq!(a.accuracy, b.accuracy);
            assert_eq!(a.kept, b.kept);
            let freq = cmd_heatmap(&cfg, &ck, &dir.path().join("hm"), 2).unwrap();
            assert_eq!(freq.len(), 3);
            assert!(freq.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn identical_configs_give_identical_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick(Pipeline::Vit);
        cmd_train_teacher(&cfg, dir.path()).unwrap();
        let a = cmd_train(&cfg, &teacher_path(dir.path()), &dir.path().join("a")).unwrap();
        let b = cmd_train(&cfg, &teacher_path(dir.path()), &dir.path().join("b")).unwrap();
        assert_eq!(a.epochs, b.epochs);
        let ca = fs::read(dir.path().join("a/metrics.csv")).unwrap();
        let cb = fs::read(dir.path().join("b/metrics.csv")).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn coarsening() {
        let mut inf = vec![false; 16];
        inf[5] = true;
        assert_eq!(coarsen_informative(&inf, 4, 2), vec![true, false, false, false]);
        assert_eq!(pgm(&[0.0, 1.0], 2, 1), b"P5\n2 1\n255\n\x00\xff".to_vec());
    }
}
