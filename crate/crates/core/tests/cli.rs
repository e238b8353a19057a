//! End-to-end runs of the `crossrecon` binary on a tiny dataset.

use std::path::Path;
use std::process::{Command, Output};

fn crossrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crossrecon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_train_evaluate_infer() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let out = stdout(&crossrecon(&["gen-data", "--count", "40", "--seed", "3", "--out", s(&data)]));
    assert!(out.contains("wrote 40 samples"));
    assert!(data.join("manifest.jsonl").exists());

    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "batch_size": 8}"#).unwrap();
    let out = stdout(&crossrecon(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    assert!(out.starts_with("best epoch 1"));
    assert!(run.join("train_log.csv").exists());
    let ckpt = run.join("best");

    let csv = dir.path().join("per_sample.csv");
    let out = stdout(&crossrecon(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "val", "--csv", s(&csv)]));
    assert!(out.starts_with("val: mIoU"), "{out}");
    let rows = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);

    let image = data.join("test/images").read_dir().unwrap().next().unwrap().unwrap().path();
    let mask = dir.path().join("m.png");
    let out = stdout(&crossrecon(&[
        "infer", "--ckpt", s(&ckpt), "--image", s(&image), "--prompt", "upper left circle", "--emit-heatmaps", "--out", s(&mask),
    ]));
    assert!(out.contains("word interest"));
    assert!(mask.exists() && dir.path().join("m.poi.png").exists());
}

#[test]
fn gradcheck_passes() {
    let out = stdout(&crossrecon(&["gradcheck", "--seed", "1"]));
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 2, "{out}");
}

#[test]
fn ablate_writes_one_row_per_cell_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    stdout(&crossrecon(&["gen-data", "--count", "30", "--out", s(&data)]));
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "batch_size": 8}"#).unwrap();
    let csv = dir.path().join("grid.csv");
    stdout(&crossrecon(&["ablate", "--config", s(&cfg), "--axes", "cvr", "--data", s(&data), "--out", s(&csv)]));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 3);
    assert!(text.lines().next().unwrap().starts_with("cell,seed"));
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochz": 3}"#).unwrap();
    let o = crossrecon(&["train", "--config", s(&cfg), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    let o = crossrecon(&["eval", "--ckpt", s(&dir.path().join("missing")), "--data", s(dir.path())]);
    assert!(!o.status.success());
}
