//! End-to-end runs of the `selfmae` binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &[&str] = &[
    "--image-size",
    "16",
    "--patch-size",
    "4",
    "--embed-dim",
    "16",
    "--decoder-dim",
    "16",
    "--encoder-layers",
    "2",
    "--decoder-layers",
    "1",
    "--heads",
    "2",
    "--mlp-ratio",
    "2",
];

fn run(sub: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfmae"))
        .arg(sub)
        .args(TINY)
        .args(args)
        .env("RUST_LOG", "warn")
        .env("SELFMAE_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(sub: &str, args: &[&str]) -> Value {
    let out = run(sub, args);
    assert!(
        out.status.success(),
        "{sub} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(data: &Path) {
    ok(
        "gen-data",
        &[
            "--data-dir",
            s(data),
            "--train-count",
            "24",
            "--val-count",
            "8",
            "--out-dir",
            s(&data.join("runs")),
        ],
    );
}

#[test]
fn gen_data_creates_missing_directories() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("a/b/data");
    gen_data(&data);
    assert!(data.join("manifest.json").exists());
    assert_eq!(fs::read_dir(data.join("val")).unwrap().count(), 16);
}

#[test]
fn invalid_values_exit_with_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        "gen-data",
        &["--data-dir", s(dir.path()), "--families", "stripes,plaid"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.families"));

    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "train.mask_ratio = 0.5\nmodel.colour = 3\n").unwrap();
    let out = run("pretrain", &["--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.colour"));
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("none.ckpt");
    let out = run(
        "probe",
        &["--checkpoint", s(&ck), "--data-dir", s(&dir.path().join("nothing"))],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_analyze_mask_probe() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_data(&data);
    let runs = dir.path().join("runs");
    let common = ["--data-dir", s(&data), "--out-dir", s(&runs)];

    let train = [
        &common[..],
        &[
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--trigger-epoch",
            "1",
            "--probe-size",
            "4",
        ],
    ]
    .concat();
    let summary = ok("pretrain", &train);
    assert_eq!(summary["results"]["first_informed_epoch"], 1);
    let ck = runs.join("final.ckpt");
    assert!(ck.exists() && runs.join("epochs.csv").exists());
    let epochs = fs::read_to_string(runs.join("epochs.csv")).unwrap();
    assert!(epochs.lines().nth(2).unwrap().ends_with("informed"));

    let analyze = [
        &common[..],
        &["--checkpoint", s(&ck), "--reference", s(&ck), "--analysis-images", "4"],
    ]
    .concat();
    ok("analyze", &analyze);
    let diag: Value = serde_json::from_str(&fs::read_to_string(runs.join("diagnostics.json")).unwrap()).unwrap();
    for layer in diag["layers"].as_array().unwrap() {
        for key in ["kld_attention", "kld_cosine"] {
            assert!(
                layer[key].as_f64().unwrap().abs() < 1e-9,
                "{key} of a model against itself"
            );
        }
    }

    let missing = dir.path().join("missing.ckpt");
    let analyze = [
        &common[..],
        &[
            "--checkpoint",
            s(&ck),
            "--reference",
            s(&missing),
            "--analysis-images",
            "2",
        ],
    ]
    .concat();
    let summary = ok("analyze", &analyze);
    assert!(summary["results"]["notices"][0].as_str().unwrap().contains("not found"));

    let mask = [
        &common[..],
        &["--checkpoint", s(&ck), "--mask-images", "3", "--hint-ratio", "0.125"],
    ]
    .concat();
    let summary = ok("mask", &mask);
    let images = summary["results"]["images"].as_array().unwrap();
    assert_eq!(images.len(), 3);
    for img in images.iter().filter(|i| i["status"] == "ok") {
        let name = img["image"].as_str().unwrap();
        let detail: Value =
            serde_json::from_str(&fs::read_to_string(runs.join(format!("{name}.json"))).unwrap()).unwrap();
        assert_eq!(detail["mask"]["hints"].as_array().unwrap().len(), 2);
        assert_eq!(detail["mask"]["masked"].as_array().unwrap().len(), 10);
        assert!(runs.join(format!("{name}_mask.pgm")).exists());
    }

    let probe = [
        &common[..],
        &["--checkpoint", s(&ck), "--compare", s(&ck), "--probe-iterations", "20"],
    ]
    .concat();
    let summary = ok("probe", &probe);
    assert_eq!(summary["results"]["accuracy_difference"], 0.0);
    assert!(runs.join("probe.csv").exists());
}
