use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedprompt")).args(args).output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const TINY: &str = r#"{
  "seed": 3, "num_domains": 3, "num_classes": 3, "samples_per_class": 12,
  "num_clients": 4, "clients_per_round": 2, "rounds": 3, "target": 1
}"#;

#[test]
fn run_writes_results_and_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("out");
    let o = fedprompt(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("ensemble") && stdout.contains("target 1"));
    assert!(out.join("metrics.jsonl").is_file());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert!(fedprompt(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
    }
    for f in ["config.json", "metrics.jsonl", "checkpoint.json", "evaluation.jsonl", "summary.json", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_overrides_the_target() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = fedprompt(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    for t in 0..3 {
        assert!(out.join(format!("target_{t}/checkpoint.json")).is_file());
    }
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let typo = write_config(dir.path(), r#"{"lamda": 0.5}"#);
    let o = fedprompt(&["run", "--config", &typo]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));

    let missing = dir.path().join("nope.json");
    assert_eq!(fedprompt(&["run", "--config", missing.to_str().unwrap()]).status.code(), Some(1));
    assert_eq!(fedprompt(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_detects_perturbation() {
    let o = fedprompt(&["gradcheck", "--configs", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    for family in ["global", "domain", "query", "combined"] {
        assert!(stdout.contains(family), "{stdout}");
    }
    assert_eq!(fedprompt(&["gradcheck", "--configs", "2", "--perturb", "0.01"]).status.code(), Some(3));
}
