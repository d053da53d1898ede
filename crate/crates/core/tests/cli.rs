//! Command-line exit codes and outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_htbilevel"));
    c.env_remove("HTBILEVEL_WORKERS");
    c
}

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("specs/smoke.toml")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

const GAME: &str = "name = \"cli\"\nn_runs = 2\n[problem]\nkind = \"two_player_game\"\ndim = 3\n\
                    [noise]\nkind = \"gaussian\"\nscale = 1.0\n";

fn write_spec(dir: &Path, arms: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    std::fs::write(&path, format!("{GAME}{arms}")).unwrap();
    path
}

#[test]
fn selftest_passes() {
    let out = bin().arg("selftest").output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&bin().output().unwrap()), 1);
    assert_eq!(code(&bin().arg("run").output().unwrap()), 1);
    assert_eq!(code(&bin().args(["frobnicate", "x"]).output().unwrap()), 1);
    assert_eq!(code(&bin().arg("--help").output().unwrap()), 0);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&bin().args(["validate", "/nonexistent/spec.toml"]).output().unwrap()), 1);
    let bad = write_spec(dir.path(), "[[arms]]\nalgo = \"sgda\"\nT = 5\neta_x = -1.0\neta_y = 1e-2\n");
    assert_eq!(code(&bin().arg("validate").arg(&bad).output().unwrap()), 1);
    let out = bin().arg("validate").arg(smoke()).env("HTBILEVEL_WORKERS", "many").output().unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn validate_lists_the_grid() {
    let out = bin().arg("validate").arg(smoke()).output().unwrap();
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("4 grid points x 3 runs"), "{text}");
}

#[test]
fn run_writes_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .arg("run")
        .arg(smoke())
        .arg("--out")
        .arg(dir.path())
        .args(["--workers", "2", "--seed", "9"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(dir.path().join("raw")).unwrap().count(), 12);
    assert_eq!(std::fs::read_dir(dir.path().join("aggregate")).unwrap().count(), 4);
    assert!(dir.path().join("grid.csv").exists());
}

#[test]
fn nested_divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "[[arms]]\nalgo = \"n2sgda\"\nT = 5\nK = 2\neta_x = 1e13\neta_y = 0.1\ntau_y = 5.0\n",
    );
    let out = bin().arg("run").arg(&spec).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn baseline_divergence_is_not_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(
        dir.path(),
        "[[arms]]\nalgo = \"sgda\"\nT = 50\neta_x = [1e-3, 1e6]\neta_y = 1e-2\n",
    );
    assert_eq!(code(&bin().arg("run").arg(&spec).output().unwrap()), 0);
    let out = bin().arg("grid").arg(&spec).output().unwrap();
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("best sgda"));
}
