//! End-to-end runs of the `iee` binary on a small synthetic experiment.

use std::path::Path;
use std::process::{Command, Output};

fn iee(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iee"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn iee")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
name = "small"
seeds = [0, 1]
output_dir = "out"
[model]
kind = "mlp"
hidden = [16, 16]
[plan]
sparsity = 0.8
[schedule]
h = 10
j = 10
q = 10
[optimizer]
epochs = 20
[data]
kind = "synthetic"
samples = 400
"#;

fn workspace(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), config).unwrap();
    dir
}

#[test]
fn train_writes_logs_and_manifests_then_report_reads_them() {
    let dir = workspace(SMALL);
    let out = iee(&["train", "-c", "small.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).lines().filter(|l| l.starts_with("seed ")).count(), 2);
    let root = dir.path().join("out/small");
    assert!(root.join("config.toml").is_file() && root.join("manifest.json").is_file());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    for s in 0..2 {
        assert!(root.join(format!("seed-{s}/events.jsonl")).is_file());
    }

    let report = iee(
        &["report", "out/small/seed-0/events.jsonl", "out/small/seed-1/events.jsonl", "-o", "rep"],
        dir.path(),
    );
    assert!(report.status.success(), "{}", String::from_utf8_lossy(&report.stderr));
    let csv = std::fs::read_to_string(dir.path().join("rep/report-1.csv")).unwrap();
    assert!(csv.starts_with("t,iou_prune,iou_grow,survival"));
    assert!(csv.lines().count() > 2);
    assert!(dir.path().join("rep/summary.json").is_file());
}

#[test]
fn flops_lists_every_method() {
    let dir = workspace(SMALL);
    let out = iee(&["flops", "-c", "small.toml"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    for method in ["iee", "dense", "rigl", "snfs"] {
        assert!(text.lines().any(|l| l.starts_with(method)), "{method} missing in\n{text}");
    }
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = workspace(&SMALL.replace("seeds = [0, 1]", "seeds = [0]"));
    std::fs::write(dir.path().join("grid.toml"), "freeze = [true, false]\ngrow_init = [\"mru\", \"zero\"]\n").unwrap();
    let out = iee(&["ablate", "-c", "small.toml", "--grid", "grid.toml", "--jobs", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/small/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
}

#[test]
fn invalid_config_exits_with_config_code() {
    let dir = workspace("[model]\nkind = \"mlp\"\n[plan]\nsparsity = 2.0\n[data]\nkind = \"synthetic\"\n");
    let out = iee(&["train", "-c", "small.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sparsity"));
}

#[test]
fn missing_dataset_exits_with_data_code() {
    let dir = workspace("[model]\nkind = \"mlp\"\n[data]\nkind = \"idx-images\"\npath = \"nowhere\"\n");
    let out = iee(&["train", "-c", "small.toml"], dir.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
