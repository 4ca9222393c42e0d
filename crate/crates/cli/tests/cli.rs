//! Drives every subcommand once on a tiny dataset.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn weaktr(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_weaktr")).args(args).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "weaktr {args:?} failed:\n{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_train(phase: &str) -> Value {
    json!({
        "phase": phase, "epochs": 1, "batch_size": 4, "optimizer": "adam_w", "base_lr": 1e-3,
        "warmup_epochs": 0, "schedule": "cosine", "encoder_lr_scale": 0.1, "weight_decay": 0.0,
        "momentum": 0.9, "poly_power": 0.9, "seed": 3
    })
}

#[test]
fn full_pipeline_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    weaktr(&["gen-data", "--out", p(&data), "--count", "6", "--seed", "1", "--classes", "2", "--size", "16"]);
    assert!(data.join("labels.csv").exists());
    assert!(data.join("images/0005.wtt").exists());

    let cam_cfg = root.join("cam.json");
    let model = json!({
        "image_size": 16, "patch_size": 4, "channels": 3, "num_classes": 2, "embed_dim": 8,
        "layers": 1, "heads": 2, "mlp_ratio": 2.0, "seed": 0
    });
    fs::write(&cam_cfg, json!({"model": model, "train": tiny_train("cam")}).to_string()).unwrap();
    let cam = root.join("cam");
    weaktr(&["train-cam", "--data", p(&data), "--config", p(&cam_cfg), "--out", p(&cam)]);
    assert!(cam.join("manifest.json").exists());
    assert_eq!(fs::read_to_string(cam.join("curve.csv")).unwrap().lines().count(), 2);

    let export = root.join("export");
    weaktr(&["export-cam", "--ckpt", p(&cam), "--data", p(&data), "--out", p(&export)]);
    assert!(export.join("cams/0000_fine.wtt").exists());
    assert!(export.join("heatmaps/0000_fine_c1.pgm").exists());
    let pgm = fs::read(export.join("heatmaps/0000_seed.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert_eq!(pgm.len(), 13 + 256);

    let rt_cfg = root.join("retrain.json");
    let decoder = json!({"decoder_layers": 1, "output_size": 16, "grad_patch_size": 4});
    fs::write(&rt_cfg, json!({"decoder": decoder, "train": tiny_train("retrain")}).to_string()).unwrap();
    let seeds = export.join("seeds");
    let mut reports = Vec::new();
    for (name, flags) in [("clip", vec!["--tau", "0.5"]), ("naive", vec!["--no-clip"]), ("gt", vec!["--gt-clip"])] {
        let seg = root.join(format!("seg_{name}"));
        let mut args = vec!["retrain", "--data", p(&data), "--seeds", p(&seeds), "--config", p(&rt_cfg)];
        args.extend(["--init", p(&cam), "--out", p(&seg), "--patch", "8"]);
        args.extend(flags);
        weaktr(&args);
        let steps = fs::read_to_string(seg.join("steps.csv")).unwrap();
        assert_eq!(steps.lines().count(), 3, "{name}: header plus two steps");

        let report = root.join(format!("{name}.json"));
        weaktr(&["eval", "--ckpt", p(&seg), "--data", p(&data), "--report", p(&report)]);
        let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
        let miou = r["miou"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&miou));
        reports.push(r);
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(root.join("seg_naive/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["retrain"]["mode"], "naive");
    assert_eq!(manifest["config"]["retrain"]["decoder"]["grad_patch_size"], 8);

    let clip_dir = root.join("clip");
    weaktr(&["inspect-clip", "--ckpt", p(&root.join("seg_clip")), "--data", p(&data), "--seeds", p(&seeds), "--out", p(&clip_dir)]);
    let lambda = fs::read_to_string(clip_dir.join("lambda.csv")).unwrap();
    assert_eq!(lambda.lines().count(), 7);
    assert!(lambda.starts_with("index,gated,lambda_global,lambda_0,lambda_1,lambda_2,lambda_3\n"));

    let attn = root.join("attn");
    let image = data.join("images/0000.wtt");
    weaktr(&["inspect-attention", "--ckpt", p(&cam), "--image", p(&image), "--out", p(&attn)]);
    let weights = fs::read_to_string(attn.join("weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 3);
    assert!(attn.join("attn_01.pgm").exists());
    assert!(attn.join("cam_fine_c0.pgm").exists());
}

#[test]
fn generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        weaktr(&["gen-data", "--out", p(dir), "--count", "3", "--seed", "7", "--classes", "3", "--size", "16"]);
    }
    for f in ["labels.csv", "images/0002.wtt", "masks/0001.wtt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn wrong_checkpoint_kind_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    weaktr(&["gen-data", "--out", p(&data), "--count", "2", "--classes", "2", "--size", "16"]);
    let out = Command::new(env!("CARGO_BIN_EXE_weaktr"))
        .args(["inspect-attention", "--ckpt", p(&data), "--image", p(&data.join("images/0000.wtt")), "--out", p(tmp.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
