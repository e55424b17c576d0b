//! End-to-end runs of the `hiap` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn hiap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hiap"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_config(dir: &Path, extra: serde_json::Value) -> std::path::PathBuf {
    let mut cfg = json!({
        "model": {"layers": 2, "heads": 2, "embed_dim": 16, "head_dim": 8, "ffn_dim": 16,
                  "image_size": 8, "patch_size": 4, "channels": 3, "num_classes": 2},
        "epochs": 2,
        "batch_size": 32,
        "seed": 9,
        "augment": false,
        "synthetic": {"train_samples": 128, "val_samples": 64, "noise": 0.5},
        "output_dir": "run",
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn train_extract_verify_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d, json!({"penalty": {"lambda_macro": 0.9, "lambda_micro": 0.45}}));

    let o = hiap(&["train", "--config", "config.json"], d);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in ["run/gated.ckpt", "run/metrics.csv", "run/trace.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }

    let o = hiap(&["extract", "--checkpoint", "run/gated.ckpt", "--out", "pruned"], d);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let desc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("pruned/architecture.json")).unwrap()).unwrap();
    assert_eq!(desc["threshold"], 0.5);
    assert!(desc["cost"]["formula_units"].as_u64().is_some());

    let o = hiap(&["verify", "--checkpoint", "run/gated.ckpt", "--pruned", "pruned"], d);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(text(&o).contains("max abs logit diff"));

    let o = hiap(&["macs", "--arch", "pruned/architecture.json"], d);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let units = desc["cost"]["formula_units"].as_u64().unwrap();
    assert!(text(&o).contains(&format!("prunable formula units {units}")));

    let o = hiap(&["trace-plot", "--trace", "run/trace.csv", "--out", "trace.svg"], d);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(std::fs::read_to_string(d.join("trace.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn verify_fails_on_tampered_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d, json!({"epochs": 1}));
    assert_eq!(code(&hiap(&["train", "--config", "config.json"], d)), 0);
    assert_eq!(code(&hiap(&["extract", "--checkpoint", "run/gated.ckpt", "--out", "p"], d)), 0);

    let path = d.join("p/weights.bin");
    let mut bytes = std::fs::read(&path).unwrap();
    let n = bytes.len();
    // a classifier weight
    bytes[n - 40..n - 36].copy_from_slice(&10.0f32.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let o = hiap(&["verify", "--checkpoint", "run/gated.ckpt", "--pruned", "p"], d);
    assert_eq!(code(&o), 1, "{}", text(&o));
    assert!(text(&o).contains("FAIL"));
}

#[test]
fn missing_dataset_path_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), json!({"synthetic": null}));
    let o = hiap(&["train", "--config", "config.json"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("train_data"), "{}", text(&o));
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let o = hiap(&["extract", "--checkpoint", "bad.ckpt", "--out", "x"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("bad.ckpt"));
}

#[test]
fn macs_presets() {
    let dir = tempfile::tempdir().unwrap();
    let o = hiap(&["macs", "--preset", "deit-small"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(text(&o).contains("prunable formula units 9081391104"));

    let o = hiap(&["macs", "--preset", "vit-tiny"], dir.path());
    let out = text(&o);
    let halved: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("total halved "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((halved / 174e6 - 1.0).abs() <= 0.10, "{halved}");
}

#[test]
fn trace_plot_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let header = "step,layer,gate_family,index,probability,tau,expected_cost_fraction\n";
    std::fs::write(d.join("empty.csv"), header).unwrap();
    assert_eq!(code(&hiap(&["trace-plot", "--trace", "empty.csv", "--out", "e.svg"], d)), 2);

    std::fs::write(d.join("bad.csv"), format!("{header}0,0,head,0,1.0,2.0,1.0\n0,0,head,1,oops,2.0,1.0\n")).unwrap();
    let o = hiap(&["trace-plot", "--trace", "bad.csv", "--out", "b.svg"], d);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("line 3"), "{}", text(&o));
    assert!(!d.join("b.svg").exists());
}

#[test]
fn sweep_single_ratio_and_malformed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d, json!({"epochs": 1}));
    let o = hiap(&["sweep", "--base-config", "config.json", "--ratios", "2:1@0.9"], d);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let csv = std::fs::read_to_string(d.join("run/pareto.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("2:1@0.9,0.9,0.45,"));

    let o = hiap(&["sweep", "--base-config", "config.json", "--ratios", "2:1"], d);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&hiap(&["train"], dir.path())), 2);
    assert_eq!(code(&hiap(&["macs", "--preset", "vit-tiny", "--nope"], dir.path())), 2);
    for sub in ["train", "extract", "verify", "macs", "trace-plot", "sweep"] {
        let o = hiap(&[sub, "--help"], dir.path());
        assert_eq!(code(&o), 0, "{sub}");
    }
}
