use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dynsparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynsparse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// A model small enough to train in well under a second.
fn tiny_config(dir: &Path, out: &Path) -> String {
    let path = dir.join("tiny.json");
    let cfg = serde_json::json!({
        "vit": {"depth": 6, "embed_dim": 16, "heads": 2, "grid_h": 8, "grid_w": 8, "in_dim": 16, "num_classes": 4},
        "optim": {"epochs": 2, "warmup_epochs": 0, "steps_per_epoch": 2, "batch_size": 4, "lr_warmup_steps": 1},
        "teacher": {"epochs": 2},
        "eval_size": 16,
        "out": out,
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn invalid_config_fails_before_touching_the_filesystem() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let o = dynsparse(&["train-teacher", "--rho", "1.5", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[config]"), "{err}");
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(!out.exists());

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"rho": 0.7, "learning_rate": 3}"#).unwrap();
    let o = dynsparse(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = dynsparse(&["train", "--pipeline", "hier", "--policy", "attention", "--out", out.to_str().unwrap()]);
    assert!(stderr(&o).starts_with("error[config]"));
    assert!(!out.exists());
}

#[test]
fn contradicting_pipeline_flag_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tiny_config(tmp.path(), &out);
    let o = dynsparse(&["flops", "--config", &cfg, "--pipeline", "hier"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("contradicts"));
}

#[test]
fn missing_teacher_names_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = dynsparse(&["train", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error[missing_teacher]"), "{err}");
    assert!(err.contains("--train-teacher"), "{err}");
}

#[test]
fn flops_presets() {
    let o = dynsparse(&["flops", "--model", "deit-s", "--rho", "0.7", "--json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let g = v["gflops"].as_f64().unwrap();
    assert!((g - 3.0).abs() < 0.09, "{g}");
    assert!(v["convention"].as_str().unwrap().contains("MAC"));

    let o = dynsparse(&["flops", "--model", "convnext-s", "--rho", "0.9", "--fast-path", "linear"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("convnext-s"));

    let o = dynsparse(&["flops", "--model", "resnet-50"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("deit-s"));
}

#[test]
fn train_eval_heatmap_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = tiny_config(tmp.path(), &out);

    let o = dynsparse(&["train", "--config", &cfg, "--train-teacher"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["teacher.ckpt", "student.ckpt", "metrics.csv", "teacher_metrics.csv", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    // Same config and seed: byte-identical metrics.
    let again = tmp.path().join("again");
    let o = dynsparse(&["train", "--config", &cfg, "--train-teacher", "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(out.join("metrics.csv")).unwrap(),
        fs::read(again.join("metrics.csv")).unwrap()
    );

    // A reloaded checkpoint reproduces the accuracy it was saved with.
    let accuracy = |o: &Output| {
        stdout(o)
            .lines()
            .find_map(|l| l.strip_prefix("accuracy ").map(str::to_string))
            .unwrap()
    };
    let e1 = dynsparse(&["eval", "--config", &cfg]);
    let e2 = dynsparse(&["eval", "--config", &cfg, "--checkpoint", again.join("student.ckpt").to_str().unwrap()]);
    assert!(e1.status.success(), "{}", stderr(&e1));
    assert_eq!(accuracy(&e1), accuracy(&e2));
    assert!(out.join("eval.json").exists() && out.join("kept.csv").exists());

    let o = dynsparse(&["heatmap", "--config", &cfg, "--samples", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = fs::read(out.join("heatmap").join("heatmap_stage2.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8\n255\n"));
    assert!(out.join("heatmap").join("sample1_stage0.pgm").exists());

    let o = dynsparse(&["heatmap", "--config", &cfg, "--rho", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("heatmap").join("heatmap_stage0.csv")).unwrap();
    assert!(csv.split([',', '\n']).filter(|s| !s.is_empty()).all(|v| v == "1.0000"), "{csv}");

    let o = dynsparse(&["bench", "--config", &cfg, "--batch", "4", "--repeats", "2", "--warmup", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("dense") && stdout(&o).contains("sparse"));
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("student.ckpt");
    fs::write(&ck, b"dynsparse-checkpoint 1\nmeta {}\ntensor a f32 4\nend\n\x00").unwrap();
    let o = dynsparse(&["eval", "--checkpoint", ck.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[corrupt_checkpoint]"), "{}", stderr(&o));
}
