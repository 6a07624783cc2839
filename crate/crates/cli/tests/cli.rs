use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_afafed"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn afafed")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("small.toml");
    let out = run(&["run", "--config", s(&cfg), "--out", s(dir.path()), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,time,sender,age,beta,fi,lambda_checksum,global_risk,grad_sqnorm"
    );
    assert_eq!(lines.count(), 200);
    let summary = std::fs::read_to_string(dir.path().join("summary.toml")).unwrap();
    assert!(summary.contains("seed = 3"));
    assert!(dir.path().join("coworkers.csv").exists());
    assert!(!dir.path().join("estimates.toml").exists());
}

#[test]
fn profile_writes_estimates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("small.toml");
    let out = run(&["profile", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let est = std::fs::read_to_string(dir.path().join("estimates.toml")).unwrap();
    assert!(est.contains("samples = 200"));
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("small.toml");
    for d in [&a, &b] {
        assert!(run(&["run", "--config", s(&cfg), "--out", s(d.path())]).status.success());
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn bound_prints_all_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("bound.toml");
    let out = run(&["bound", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["beta_max_admissible", "bound_constant_beta", "bound_clipped_beta", "bound_scaled"] {
        assert!(text.contains(key), "{key} missing from:\n{text}");
    }
    assert!(dir.path().join("bounds.toml").exists());
}

#[test]
fn sweep_runs_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("sweep.toml");
    let out = run(&["sweep", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cells = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(cells, 12);
}

#[test]
fn invalid_config_fails_with_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "preset = \"table_a1_small\"\n[buffer]\ncapacity = 4\nminibatch_size = 16\n").unwrap();
    let out = run(&["run", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("buffer"), "{err}");
}

#[test]
fn missing_config_fails() {
    let out = run(&["run", "--config", "/nonexistent/x.toml", "--out", "/tmp/afafed-none"]);
    assert!(!out.status.success());
}
