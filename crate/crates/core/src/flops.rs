//! Analytic multiply-accumulate model for both pipelines.
//!
//! Counts cover matrix products and convolutions only; normalisation,
//! activations and softmax are ignored. The counts agree exactly with the
//! instrumented kernels in [`crate::macs`] on every configuration that the
//! engine can execute.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hier::{FastPathKind, HierConfig, HierSchedule};
use crate::predictor::{hidden_dims, keep_count};
use crate::vit::{SparsificationSchedule, VitConfig};

/// Reported "FLOPs" are multiply-accumulate counts.
pub const CONVENTION: &str = "FLOPs reported as multiply-accumulates (1 FLOP = 1 MAC); GFLOPs = MACs / 1e9";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsEntry {
    pub layer: String,
    pub op: &'static str,
    /// Tokens or spatial locations processed.
    pub tokens: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub model: String,
    pub convention: &'static str,
    pub entries: Vec<FlopsEntry>,
    pub total_macs: u64,
    pub dense_macs: u64,
    pub gflops: f64,
    pub dense_gflops: f64,
    /// `100 * (dense - total) / dense`.
    pub reduction_pct: f64,
}

impl FlopsReport {
    fn new(model: &str, entries: Vec<FlopsEntry>, dense_macs: u64) -> Self {
        let total_macs = entries.iter().map(|e| e.macs).sum();
        Self {
            model: model.to_string(),
            convention: CONVENTION,
            entries,
            total_macs,
            dense_macs,
            gflops: total_macs as f64 / 1e9,
            dense_gflops: dense_macs as f64 / 1e9,
            reduction_pct: 100.0 * (dense_macs as f64 - total_macs as f64) / dense_macs.max(1) as f64,
        }
    }

    /// MACs of entries whose op equals `op`.
    pub fn macs_of(&self, op: &str) -> u64 {
        self.entries.iter().filter(|e| e.op == op).map(|e| e.macs).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let w = self
            .entries
            .iter()
            .map(|e| e.layer.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.convention);
        let _ = writeln!(s, "# model: {}", self.model);
        let _ = writeln!(s, "{:<w$}  {:<10}  {:>7}  {:>15}", "layer", "op", "tokens", "MACs");
        for e in &self.entries {
            let _ = writeln!(s, "{:<w$}  {:<10}  {:>7}  {:>15}", e.layer, e.op, e.tokens, e.macs);
        }
        let _ = writeln!(
            s,
            "total {:.3} GFLOPs, dense {:.3} GFLOPs, reduction {:.1}%",
            self.gflops, self.dense_gflops, self.reduction_pct
        );
        s
    }
}

/// A convolution in a non-linear patch stem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub out_h: usize,
    pub out_w: usize,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvSpec {
    pub fn macs(&self) -> u64 {
        (self.out_h * self.out_w * self.k * self.k * self.c_in * self.c_out) as u64
    }
}

/// Shape of an isotropic transformer for cost purposes. An empty `stem`
/// means a linear patch embedding from `cfg.in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct VitFlopsModel {
    pub name: String,
    pub cfg: VitConfig,
    pub stem: Vec<ConvSpec>,
    /// Default sparsification locations (zero-based block indices).
    pub locations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HierFlopsModel {
    pub name: String,
    pub cfg: HierConfig,
}

/// MACs of the scoring module on `n` tokens of width `c`.
pub fn flops_prediction_module(c: usize, n: usize) -> u64 {
    let (h1, h2) = hidden_dims(c);
    let per_token = 2 * c * h1 + 2 * h1 * h1 + h1 * h2 + h2 * 2;
    (n * per_token) as u64
}

/// Attention (projections plus the two token-token products) of one block.
pub fn vit_attention_macs(n: usize, c: usize) -> u64 {
    (4 * n * c * c + 2 * n * n * c) as u64
}

pub fn vit_mlp_macs(n: usize, c: usize, mlp_ratio: usize) -> u64 {
    (2 * n * c * mlp_ratio * c) as u64
}

/// Per-row MACs of a fast path at width `c`.
pub fn fast_path_macs(kind: FastPathKind, c: usize) -> u64 {
    match kind {
        FastPathKind::Linear => (c * c) as u64,
        FastPathKind::Bottleneck => (2 * c * (c / 4).max(1)) as u64,
        FastPathKind::LearnableMask | FastPathKind::ZeroMask => 0,
    }
}

fn entry(layer: String, op: &'static str, tokens: usize, macs: u64) -> FlopsEntry {
    FlopsEntry {
        layer,
        op,
        tokens,
        macs,
    }
}

fn vit_entries(m: &VitFlopsModel, sched: &SparsificationSchedule) -> Vec<FlopsEntry> {
    let cfg = &m.cfg;
    let c = cfg.embed_dim;
    let np = cfg.n_patch();
    let mut out = Vec::new();
    if m.stem.is_empty() {
        out.push(entry("patch_embed".into(), "linear", np, (np * cfg.in_dim * c) as u64));
    } else {
        for (i, conv) in m.stem.iter().enumerate() {
            out.push(entry(format!("stem.conv{i}"), "conv", conv.out_h * conv.out_w, conv.macs()));
        }
    }
    let sparse = !sched.is_dense();
    let counts = sched.keep_counts(np);
    let mut n = np + 1;
    let mut stage = 0;
    for i in 0..cfg.depth {
        if sparse && stage < sched.stages() && sched.locations[stage] == i {
            out.push(entry(format!("predictor{stage}"), "predictor", n, flops_prediction_module(c, n)));
            n = counts[stage] + 1;
            stage += 1;
        }
        out.push(entry(format!("block{i}.attn"), "attention", n, vit_attention_macs(n, c)));
        out.push(entry(format!("block{i}.mlp"), "mlp", n, vit_mlp_macs(n, c, cfg.mlp_ratio)));
    }
    out.push(entry("head".into(), "linear", 1, (c * cfg.num_classes) as u64));
    out
}

/// Per-sample cost of hard-pruned inference under `sched` with the learned
/// policy.
pub fn flops_vit(m: &VitFlopsModel, sched: &SparsificationSchedule) -> Result<FlopsReport> {
    m.cfg.validate()?;
    sched.validate(m.cfg.depth, m.cfg.n_patch())?;
    let dense = SparsificationSchedule::geometric(1.0, &sched.locations);
    let dense_macs = vit_entries(m, &dense).iter().map(|e| e.macs).sum();
    Ok(FlopsReport::new(&m.name, vit_entries(m, sched), dense_macs))
}

fn hier_entries(cfg: &HierConfig, sched: &HierSchedule, fast: FastPathKind) -> Vec<FlopsEntry> {
    let mut out = Vec::new();
    let g2 = cfg.grid * cfg.grid;
    out.push(entry("stem".into(), "linear", g2, (g2 * cfg.in_dim * cfg.widths[0]) as u64));
    let sparse = !sched.is_dense();
    let k2 = cfg.kernel * cfg.kernel;
    for (s, (&depth, &c)) in cfg.depths.iter().zip(&cfg.widths).enumerate() {
        let hw = cfg.side(s).pow(2);
        if s > 0 {
            let macs = (hw * 4 * cfg.widths[s - 1] * c) as u64;
            out.push(entry(format!("down{s}"), "linear", hw, macs));
        }
        let ffn_row = (2 * c * cfg.mlp_ratio * c) as u64;
        for j in 0..depth {
            let name = format!("stage{s}.block{j}");
            out.push(entry(format!("{name}.mixer"), "dwconv", hw, (hw * c * k2) as u64));
            let active = if sparse && s == sched.stage { sched.decision_for(j) } else { None };
            match active {
                None => out.push(entry(format!("{name}.ffn"), "mlp", hw, hw as u64 * ffn_row)),
                Some(i) => {
                    if sched.layers[i] == j {
                        out.push(entry(
                            format!("{name}.predictor"),
                            "predictor",
                            hw,
                            flops_prediction_module(c, hw),
                        ));
                    }
                    let kept = keep_count(sched.ratios[i], hw);
                    out.push(entry(format!("{name}.slow"), "mlp", kept, kept as u64 * ffn_row));
                    let rest = hw - kept;
                    out.push(entry(
                        format!("{name}.fast"),
                        "fast_path",
                        rest,
                        rest as u64 * fast_path_macs(fast, c),
                    ));
                }
            }
        }
    }
    let last = *cfg.widths.last().expect("validated");
    out.push(entry("head".into(), "linear", 1, (last * cfg.num_classes) as u64));
    out
}

/// Per-sample cost of split/reassemble inference with the learned policy.
pub fn flops_hier(m: &HierFlopsModel, sched: &HierSchedule, fast: FastPathKind) -> Result<FlopsReport> {
    m.cfg.validate()?;
    sched.validate(&m.cfg)?;
    let dense = HierSchedule {
        ratios: vec![1.0; sched.layers.len()],
        ..sched.clone()
    };
    let dense_macs = hier_entries(&m.cfg, &dense, fast).iter().map(|e| e.macs).sum();
    Ok(FlopsReport::new(&m.name, hier_entries(&m.cfg, sched, fast), dense_macs))
}

fn vit_shape(depth: usize, c: usize, heads: usize, mlp_ratio: usize) -> VitConfig {
    VitConfig {
        depth,
        embed_dim: c,
        heads,
        mlp_ratio,
        grid_h: 14,
        grid_w: 14,
        in_dim: 16 * 16 * 3,
        num_classes: 1000,
    }
}

/// Four-convolution patch stem ending in an 8x8 stride-8 projection to `c`.
fn lv_vit_stem(c: usize) -> Vec<ConvSpec> {
    let conv = |out, k, c_in, c_out| ConvSpec {
        out_h: out,
        out_w: out,
        k,
        c_in,
        c_out,
    };
    vec![
        conv(112, 7, 3, 64),
        conv(112, 3, 64, 64),
        conv(112, 3, 64, 64),
        conv(14, 8, 64, c),
    ]
}

pub const VIT_PRESETS: [&str; 5] = ["deit-s", "deit-b", "lv-vit-s", "lv-vit-m", "tiny-vit-d6"];
pub const HIER_PRESETS: [&str; 4] = ["convnext-t", "convnext-s", "convnext-b", "tiny-hier"];

/// Named transformer shapes at 224x224 input, plus the desk-scale model.
pub fn vit_preset(name: &str) -> Result<VitFlopsModel> {
    let (cfg, stem, locations) = match name {
        "deit-s" => (vit_shape(12, 384, 6, 4), vec![], vec![3, 6, 9]),
        "deit-b" => (vit_shape(12, 768, 12, 4), vec![], vec![3, 6, 9]),
        "lv-vit-s" => (vit_shape(16, 384, 6, 3), lv_vit_stem(384), vec![4, 8, 12]),
        "lv-vit-m" => (vit_shape(20, 512, 8, 3), lv_vit_stem(512), vec![5, 10, 15]),
        "tiny-vit-d6" => (VitConfig::tiny_d6(16, 4), vec![], vec![1, 3, 4]),
        _ => {
            return Err(Error::Config(format!(
                "unknown model `{name}` (expected one of {VIT_PRESETS:?})"
            )))
        }
    };
    Ok(VitFlopsModel {
        name: name.to_string(),
        cfg,
        stem,
        locations,
    })
}

/// Named hierarchical shapes; the ImageNet ones use a 4x4 patch stem on a
/// 56x56 grid.
pub fn hier_preset(name: &str) -> Result<HierFlopsModel> {
    let convnext = |depths: [usize; 4], base: usize| HierConfig {
        depths: depths.to_vec(),
        widths: vec![base, 2 * base, 4 * base, 8 * base],
        grid: 56,
        in_dim: 4 * 4 * 3,
        num_classes: 1000,
        kernel: 7,
        mlp_ratio: 4,
    };
    let cfg = match name {
        "convnext-t" => convnext([3, 3, 9, 3], 96),
        "convnext-s" => convnext([3, 3, 27, 3], 96),
        "convnext-b" => convnext([3, 3, 27, 3], 128),
        "tiny-hier" => HierConfig::tiny(16, 4),
        _ => {
            return Err(Error::Config(format!(
                "unknown model `{name}` (expected one of {HIER_PRESETS:?})"
            )))
        }
    };
    Ok(HierFlopsModel {
        name: name.to_string(),
        cfg,
    })
}

impl HierFlopsModel {
    /// `[rho, rho-0.2, rho-0.4]` at layers `[k, 2k, 3k]` of the third stage.
    pub fn schedule(&self, rho: f64) -> HierSchedule {
        HierSchedule::arithmetic(rho, 2, self.cfg.depths[2])
    }
}

impl VitFlopsModel {
    pub fn schedule(&self, rho: f64) -> SparsificationSchedule {
        SparsificationSchedule::geometric(rho, &self.locations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictor_hand_count() {
        // c = 2: h1 = 1, h2 = 1; 2*2*1 + 2*1*1 + 1*1 + 1*2 = 9 per token.
        assert_eq!(flops_prediction_module(2, 1), 9);
        assert_eq!(flops_prediction_module(384, 197), 197 * 239_808);
        assert_eq!(flops_prediction_module(64, 40), 2 * flops_prediction_module(64, 20));
    }

    #[test]
    fn predictor_overhead_relative_to_block_and_network() {
        let block = vit_attention_macs(197, 384) + vit_mlp_macs(197, 384, 4);
        let pred = flops_prediction_module(384, 197) as f64;
        let per_block = pred / block as f64;
        assert!((0.12..0.13).contains(&per_block), "{per_block}");
        let m = vit_preset("deit-s").unwrap();
        let net = flops_vit(&m, &m.schedule(1.0)).unwrap().total_macs as f64;
        assert!(pred / net < 0.02, "{}", pred / net);
    }

    #[test]
    fn deit_small_dense_and_pruned() {
        let m = vit_preset("deit-s").unwrap();
        let dense = flops_vit(&m, &m.schedule(1.0)).unwrap();
        assert!((dense.gflops - 4.6).abs() / 4.6 < 0.02, "{}", dense.gflops);
        assert_eq!(dense.total_macs, dense.dense_macs);
        assert_eq!(dense.macs_of("predictor"), 0);
        let r = flops_vit(&m, &m.schedule(0.7)).unwrap();
        assert!((r.gflops - 3.0).abs() / 3.0 < 0.03, "{}", r.gflops);
        assert_eq!(r.total_macs, r.entries.iter().map(|e| e.macs).sum::<u64>());
    }

    #[test]
    fn table_reductions_within_three_points() {
        let expected = [
            ("deit-s", [12.0, 25.0, 35.0]),
            ("deit-b", [14.0, 27.0, 35.0]),
            ("lv-vit-s", [11.0, 21.0, 31.0]),
            ("lv-vit-m", [12.0, 23.0, 32.0]),
        ];
        for (name, pct) in expected {
            let m = vit_preset(name).unwrap();
            for (rho, want) in [0.9, 0.8, 0.7].into_iter().zip(pct) {
                let r = flops_vit(&m, &m.schedule(rho)).unwrap();
                assert!((r.reduction_pct - want).abs() <= 3.0, "{name} {rho}: {}", r.reduction_pct);
            }
        }
        let lv = flops_vit(&vit_preset("lv-vit-s").unwrap(), &SparsificationSchedule::geometric(1.0, &[4, 8, 12]));
        assert!((lv.unwrap().gflops - 6.6).abs() < 0.2);
    }

    #[test]
    fn convnext_small_linear_fast_path() {
        let m = hier_preset("convnext-s").unwrap();
        let s = m.schedule(0.9);
        assert_eq!(s.layers, vec![3, 6, 9]);
        let r = flops_hier(&m, &s, FastPathKind::Linear).unwrap();
        assert!((r.dense_gflops - 8.7).abs() < 0.1, "{}", r.dense_gflops);
        assert!((r.reduction_pct - 22.0).abs() <= 3.0, "{}", r.reduction_pct);
        let z = flops_hier(&m, &s, FastPathKind::ZeroMask).unwrap();
        assert_eq!(z.macs_of("fast_path"), 0);
    }

    #[test]
    fn fast_path_ordering() {
        let m = hier_preset("convnext-s").unwrap();
        let s = m.schedule(0.9);
        let g: Vec<u64> = FastPathKind::ALL
            .iter()
            .map(|&k| flops_hier(&m, &s, k).unwrap().total_macs)
            .collect();
        // linear, bottleneck, learnable mask, zero mask
        let dense = flops_hier(&m, &s, FastPathKind::Linear).unwrap().dense_macs;
        assert!(g[3] <= g[2] && g[2] <= g[1] && g[1] < g[0] && g[0] < dense);
    }

    #[test]
    fn dense_hier_schedule_is_baseline() {
        let m = hier_preset("tiny-hier").unwrap();
        let s = HierSchedule {
            ratios: vec![1.0; 3],
            ..m.schedule(0.9)
        };
        let r = flops_hier(&m, &s, FastPathKind::Bottleneck).unwrap();
        assert_eq!(r.total_macs, r.dense_macs);
        assert!(r.to_table().contains("GFLOPs"));
        assert!(r.to_json().unwrap().contains("\"convention\""));
    }
}
