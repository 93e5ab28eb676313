use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynsparse::checkpoint::Checkpoint;
use dynsparse::flops::{flops_hier, flops_vit, hier_preset, vit_preset, HIER_PRESETS, VIT_PRESETS};
use dynsparse::harness::{
    cmd_bench, cmd_eval, cmd_heatmap, cmd_train, cmd_train_teacher, load_model, student_path, teacher_path,
    FitSummary, Pipeline, RunConfig,
};
use dynsparse::hier::FastPathKind;
use dynsparse::vit::Policy;
use dynsparse::Error;

#[derive(Parser)]
#[command(name = "dynsparse", version, about = "Dynamic spatial sparsification experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fine-tune a sparsified student from a dense teacher.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train the teacher first when its checkpoint is missing.
        #[arg(long)]
        train_teacher: bool,
        /// Teacher checkpoint (default: <out>/teacher.ckpt).
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Train the dense teacher.
    TrainTeacher {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Accuracy and per-stage kept indices on the evaluation set.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate (default: <out>/student.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dense vs sparsified inference throughput.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
    },
    /// Analytic FLOPs of a preset or of the run's model.
    Flops {
        #[command(flatten)]
        run: RunArgs,
        /// One of the built-in shapes; omitted means the run config.
        #[arg(long)]
        model: Option<String>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Per-stage keep-frequency maps and per-sample masks.
    Heatmap {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of samples whose masks are exported.
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    pipeline: Option<Pipeline>,
    #[arg(long)]
    fast_path: Option<FastPathKind>,
    #[arg(long)]
    policy: Option<Policy>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_distill: bool,
    #[arg(long)]
    no_kl: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> dynsparse::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let c = RunConfig::from_json(&fs::read_to_string(path)?)?;
                if let Some(p) = self.pipeline {
                    if p != c.pipeline {
                        return Err(Error::Config(format!(
                            "--pipeline {p:?} contradicts the config file's {:?}",
                            c.pipeline
                        )));
                    }
                }
                c
            }
            None => RunConfig::for_pipeline(self.pipeline.unwrap_or_default()),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(r) = self.rho {
            cfg.rho = r;
        }
        if let Some(f) = self.fast_path {
            cfg.fast_path = f;
        }
        if let Some(p) = self.policy {
            cfg.policy = p;
        }
        if let Some(e) = self.epochs {
            cfg.optim.epochs = e;
            cfg.teacher.epochs = e;
            cfg.optim.warmup_epochs = cfg.optim.warmup_epochs.min(e);
        }
        let mut w = cfg.loss_weights();
        if self.no_distill {
            w.distill = 0.0;
        }
        if self.no_kl {
            w.kl = 0.0;
        }
        if self.no_distill || self.no_kl {
            cfg.loss = Some(w);
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn load_checkpoint(path: &Path) -> dynsparse::Result<Checkpoint<f32>> {
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("no checkpoint at {}", path.display()),
        )));
    }
    Checkpoint::load(path)
}

fn print_fit(label: &str, s: &FitSummary) {
    for e in &s.epochs {
        let keep: Vec<String> = e.keep.iter().map(|k| format!("{k:.3}")).collect();
        println!(
            "{label} epoch {:>3}  loss {:.4}  train_acc {:.3}  eval_acc {:.3}  keep [{}]",
            e.epoch,
            e.loss.total,
            e.train_acc,
            e.eval_acc,
            keep.join(", ")
        );
    }
    let r = &s.final_eval;
    println!("{label} final accuracy {:.4}", r.accuracy);
    if let (Some(p), Some(q)) = (r.precision.last(), r.random_precision.last()) {
        println!("{label} final precision {p:.4} (random {q:.4}, base rate {:.4})", r.base_rate);
    }
}

fn run(cli: Cli) -> dynsparse::Result<()> {
    match cli.cmd {
        Cmd::TrainTeacher { run } => {
            let cfg = run.resolve()?;
            let s = cmd_train_teacher(&cfg, &cfg.out)?;
            print_fit("teacher", &s);
            println!("wrote {}", teacher_path(&cfg.out).display());
        }
        Cmd::Train {
            run,
            train_teacher,
            teacher,
        } => {
            let cfg = run.resolve()?;
            let tpath = teacher.unwrap_or_else(|| teacher_path(&cfg.out));
            if train_teacher && !tpath.exists() {
                let tdir = tpath.parent().map(Path::to_path_buf).unwrap_or_default();
                let s = cmd_train_teacher(&cfg, &tdir)?;
                print_fit("teacher", &s);
                if teacher_path(&tdir) != tpath {
                    fs::rename(teacher_path(&tdir), &tpath)?;
                }
            }
            let s = cmd_train(&cfg, &tpath, &cfg.out)?;
            print_fit("student", &s);
            println!("wrote {}", student_path(&cfg.out).display());
        }
        Cmd::Eval { run, checkpoint } => {
            let cfg = run.resolve()?;
            let ck = load_checkpoint(&checkpoint.unwrap_or_else(|| student_path(&cfg.out)))?;
            let r = cmd_eval(&cfg, &ck, cfg.rho >= 1.0, Some(&cfg.out))?;
            println!("accuracy {:.4}", r.accuracy);
            for (s, p) in r.precision.iter().enumerate() {
                println!(
                    "stage {s}: keep {:.4}  precision {:.4}  random {:.4}",
                    r.keep_ratios[s],
                    p,
                    r.random_precision.get(s).copied().unwrap_or(f64::NAN)
                );
            }
            println!("wrote {}", cfg.out.join("kept.csv").display());
        }
        Cmd::Bench {
            run,
            checkpoint,
            batch,
            repeats,
            warmup,
        } => {
            let cfg = run.resolve()?;
            let ck = load_checkpoint(&checkpoint.unwrap_or_else(|| student_path(&cfg.out)))?;
            let (ps, model) = load_model(&cfg, &ck)?;
            let rows = cmd_bench(&cfg, &ps, &model, batch, repeats, warmup)?;
            println!("{:<8} {:>14} {:>8} {:>10}", "mode", "samples/sec", "spread", "GFLOPs");
            for r in &rows {
                println!(
                    "{:<8} {:>14.1} {:>7.1}% {:>10.6}",
                    r.mode,
                    r.median_samples_per_sec,
                    100.0 * r.relative_spread,
                    r.gflops
                );
            }
        }
        Cmd::Flops { run, model, json } => {
            let cfg = run.resolve()?;
            let report = match model.as_deref() {
                Some(name) if VIT_PRESETS.contains(&name) => {
                    let m = vit_preset(name)?;
                    flops_vit(&m, &m.schedule(cfg.rho))?
                }
                Some(name) if HIER_PRESETS.contains(&name) => {
                    let m = hier_preset(name)?;
                    flops_hier(&m, &m.schedule(cfg.rho), cfg.fast_path)?
                }
                Some(name) => {
                    return Err(Error::Config(format!(
                        "unknown model `{name}`; presets: {}, {}",
                        VIT_PRESETS.join(", "),
                        HIER_PRESETS.join(", ")
                    )))
                }
                None => {
                    let (_, m) = dynsparse::harness::Model::build::<f32>(&cfg)?;
                    m.flops(&cfg, cfg.rho >= 1.0)?
                }
            };
            if json {
                println!("{}", report.to_json()?);
            } else {
                print!("{}", report.to_table());
            }
        }
        Cmd::Heatmap {
            run,
            checkpoint,
            samples,
        } => {
            let cfg = run.resolve()?;
            let ck = load_checkpoint(&checkpoint.unwrap_or_else(|| student_path(&cfg.out)))?;
            let dir = cfg.out.join("heatmap");
            let freq = cmd_heatmap(&cfg, &ck, &dir, samples)?;
            for (s, f) in freq.iter().enumerate() {
                println!("stage {s}: mean keep {:.4}", f.iter().sum::<f64>() / f.len().max(1) as f64);
            }
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::from(2)
        }
    }
}
