use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pslnet::synth::generate_test_assets;
use serde_json::Value;

fn pslnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pslnet"))
        .args(args)
        .env_remove("PSLNET_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pslnet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn build(out: &Path, seed: &str) -> PathBuf {
    ok(&[
        "dataset", "build", "--synthetic", "4", "--synthetic-size", "32", "--patch-size", "16", "--sigmas", "0",
        "--alphas", "0.3", "--seed", seed, "--out", s(out),
    ]);
    out.join("manifest.json")
}

fn tiny_config(dir: &Path, lr0: f64) -> PathBuf {
    let cfg = serde_json::json!({
        "model": {
            "base_channels": 2,
            "depth": 2,
            "interaction_hidden": 16,
            "leaky_slope": 0.2,
            "channel_schedule": [2, 4, 8]
        },
        "batch_size": 4,
        "lr0": lr0,
        "max_steps": 4,
        "checkpoint_every": 2
    });
    let p = dir.join("train.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn synthetic_corpus_has_one_entry_per_patch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = read_json(&build(&dir.path().join("a"), "1"));
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 4 * 2 * 2);
    assert!(dir.path().join("a/run.json").exists());
}

#[test]
fn manifests_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(build(&dir.path().join("a"), "5")).unwrap();
    let b = std::fs::read(build(&dir.path().join("b"), "5")).unwrap();
    assert_eq!(a, b);
    let c = std::fs::read(build(&dir.path().join("c"), "6")).unwrap();
    assert_ne!(a, c);
}

#[test]
fn usage_errors_exit_with_two() {
    let out = pslnet(&["dataset", "build", "--synthetic", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pslnet(&["summary", "--preset", "huge"]);
    assert_eq!(out.status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = pslnet(&["dataset", "build", "--synthetic", "1", "--patch-size", "0", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_files_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = pslnet(&["train", "--data", s(&dir.path().join("none.json")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn summary_reports_paper_preset() {
    let out = ok(&["summary", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["parameter_count"], 2_482_283);
    let text = String::from_utf8(ok(&["summary", "--preset", "toy", "--height", "64", "--width", "64"]).stdout).unwrap();
    assert!(text.contains("parameters: 1962007"), "{text}");
    assert!(text.contains("FLOPs at 64x64: 418922880"), "{text}");
}

#[test]
fn degrade_then_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (imgs, wms) = generate_test_assets(1, 1, (24, 20), 3);
    imgs[0].save_png(&d.join("clean.png")).unwrap();
    wms[0].save_png(&d.join("wm.png")).unwrap();
    ok(&[
        "degrade", "--input", s(&d.join("clean.png")), "--wm", s(&d.join("wm.png")), "--out", s(&d.join("bad.png")),
        "--sigma", "15", "--seed", "2",
    ]);
    let bad = pslnet::image::Image::load_png(&d.join("bad.png")).unwrap();
    assert_eq!(bad.dims(), (24, 20));
    assert!(d.join("bad.png.run.json").exists());

    let corpus = build(&d.join("corpus"), "1");
    ok(&[
        "train", "--data", s(&corpus), "--out", s(&d.join("run")), "--config", s(&tiny_config(d, 1e-3)),
    ]);
    ok(&[
        "infer", "--checkpoint", s(&d.join("run/final.ckpt")), "--input", s(&d.join("bad.png")), "--out",
        s(&d.join("restored.png")), "--output", "upper",
    ]);
    let restored = pslnet::image::Image::load_png(&d.join("restored.png")).unwrap();
    assert_eq!(restored.dims(), (24, 20));
}

#[test]
fn train_resume_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = build(&d.join("corpus"), "2");
    let cfg = tiny_config(d, 1e-3);
    ok(&["train", "--data", s(&corpus), "--out", s(&d.join("run")), "--config", s(&cfg)]);
    let log = std::fs::read_to_string(d.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(d.join("run/step_00000002.ckpt").exists());
    assert!(d.join("run/run.json").exists());

    ok(&[
        "train", "--data", s(&corpus), "--out", s(&d.join("resumed")), "--config", s(&cfg), "--resume",
        s(&d.join("run/step_00000002.ckpt")),
    ]);
    assert_eq!(
        std::fs::read(d.join("run/final.ckpt")).unwrap(),
        std::fs::read(d.join("resumed/final.ckpt")).unwrap()
    );

    let report_path = d.join("report.json");
    let out = ok(&[
        "eval", "--checkpoint", s(&d.join("run/final.ckpt")), "--data", s(&corpus), "--out", s(&report_path),
        "--grid-dir", s(&d.join("grid")), "--grid-count", "2",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("psnr"));
    let report = read_json(&report_path);
    for key in ["cells", "checkpoint_digest", "manifest_digest"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let cell = &report["cells"][0];
    for key in ["sigma", "alpha", "n", "psnr_mean", "rmse_mean", "ssim_mean", "psnr_per_image", "input_psnr_mean"] {
        assert!(cell.get(key).is_some(), "missing {key}");
    }
    assert_eq!(cell["n"], 16);
    assert_eq!(std::fs::read_dir(d.join("grid")).unwrap().count(), 2);
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = build(&d.join("corpus"), "3");
    let out = pslnet(&[
        "train", "--data", s(&corpus), "--out", s(&d.join("run")), "--config", s(&tiny_config(d, 1e30)),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let dumps: Vec<_> = std::fs::read_dir(d.join("run"))
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("divergence"))
        .collect();
    assert!(!dumps.is_empty());
}
