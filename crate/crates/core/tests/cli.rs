//! Drives the binary end to end on the shipped configs.

use std::path::{Path, PathBuf};
use std::process::Command;

use tspretrain::pipeline::{expand_run_file, load_records, RunFile};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn tspretrain(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_tspretrain")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn shipped_configs_parse() {
    let mut counts = Vec::new();
    for name in ["desk", "grid", "smoke"] {
        let file = RunFile::load(&configs().join(format!("{name}.toml"))).unwrap();
        counts.push(expand_run_file(&file).unwrap().len());
    }
    // grid: per dataset and seed, 1 ResNet + 4 PTMs x 4 generators + 2 baselines.
    assert_eq!(counts, [1, 2 * 2 * 19, 1]);
}

#[test]
fn run_rank_report_generate() {
    let dir = tempfile::tempdir().unwrap();
    let d = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    let smoke = configs().join("smoke.toml");
    let smoke = smoke.to_str().unwrap();

    let printed = tspretrain(&["run", "--config", smoke, "--out", &d("out")]);
    assert!(printed.contains("ResNet+TS2Vec+SW"));
    let base = dir.path().join("base.toml");
    let text = std::fs::read_to_string(smoke).unwrap().replace("ptm = \"TS2Vec\"", "ptm = \"none\"");
    std::fs::write(&base, text).unwrap();
    tspretrain(&["run", "--config", base.to_str().unwrap(), "--out", &d("out")]);
    assert_eq!(load_records(&dir.path().join("out/records")).unwrap().len(), 2);

    let csv = tspretrain(&["rank", "--records", &d("out/records"), "--out", &d("rank")]);
    assert!(csv.starts_with("method,avg_rank,n_datasets\n"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(std::fs::read_to_string(dir.path().join("rank/ranks.csv")).unwrap(), csv);

    tspretrain(&["report", "--records", &d("out/records"), "--out", &d("report")]);
    for f in ["report.md", "ranks.csv", "scatter.csv"] {
        assert!(dir.path().join("report").join(f).exists(), "{f}");
    }

    let gen = tspretrain(&["generate", "--kind", "RW", "--n", "7", "--config", smoke, "--out", &d("gen")]);
    let ds = tspretrain::data::load_dataset_dir(Path::new(gen.trim())).unwrap();
    assert_eq!(ds.len(), 7);
}

#[test]
fn pretrain_then_finetune_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let smoke = configs().join("smoke.toml");
    let smoke = smoke.to_str().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let losses = tspretrain(&["pretrain", "--config", smoke, "--out", ckpt]);
    assert_eq!(losses.lines().count(), 2);
    let tuned = dir.path().join("tuned.ckpt");
    let report = tspretrain(&["finetune", "--config", smoke, "--checkpoint", ckpt, "--out", tuned.to_str().unwrap()]);
    assert!(report.contains("test accuracy"));
    let model = tspretrain::models::Model::load(&tuned).unwrap();
    model.save(&dir.path().join("again.ckpt")).unwrap();
    assert_eq!(std::fs::read(&tuned).unwrap(), std::fs::read(dir.path().join("again.ckpt")).unwrap());
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "ptm = \"SimCLR\"\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tspretrain"))
        .args(["run", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}
