//! Exit-code contract of the installed binary: 0 on success, 1 for usage and
//! configuration problems, 2 for runtime failures.

use std::fs;
use std::path::Path;
use std::process::Command;

fn scot() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scot"))
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

fn write_cfg(dir: &Path, body: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, body).unwrap();
    path.display().to_string()
}

const TINY: &str = r#"{
  "version": 1, "seed": 3,
  "teacher": {"steps": 10, "batch": 4, "arch": {"hidden_width": 8, "hidden_layers": 1, "num_frequencies": 2}}
}"#;

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(scot().arg("--help")), 0);
    assert_eq!(code(scot().arg("--version")), 0);
    assert_eq!(code(scot().args(["train-teacher", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mut scot()), 1);
    assert_eq!(code(scot().arg("frobnicate")), 1);
    assert_eq!(code(scot().args(["train-teacher", "--config", "x.json"])), 1); // missing --out
}

#[test]
fn config_problems_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let missing = dir.path().join("absent.json").display().to_string();
    assert_eq!(code(scot().args(["train-teacher", "--config", &missing, "--out", out])), 1);

    let bad = write_cfg(dir.path(), r#"{"version": 1, "seed": 1, "distill": {"t_min": 0.5}}"#);
    assert_eq!(code(scot().args(["train-teacher", "--config", &bad, "--out", out])), 1);

    // Valid config but the distillation input does not exist yet.
    let ok = write_cfg(dir.path(), TINY);
    assert_eq!(code(scot().args(["distill", "--config", &ok, "--out", out])), 1);
}

#[test]
fn successful_run_exits_zero_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);
    let out_dir = dir.path().join("out");
    let out = out_dir.display().to_string();
    let result = scot().args(["train-teacher", "--config", &cfg, "--out", &out]).output().unwrap();
    assert_eq!(result.status.code().unwrap(), 0, "{}", String::from_utf8_lossy(&result.stderr));
    assert!(out_dir.join("teacher.json").exists());
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), TINY);

    // Output directory path blocked by a plain file.
    let blocked = dir.path().join("blocked");
    fs::write(&blocked, b"file").unwrap();
    let blocked = blocked.display().to_string();
    let result = scot().args(["train-teacher", "--config", &cfg, "--out", &blocked]).output().unwrap();
    assert_eq!(result.status.code().unwrap(), 2);

    // An absurd learning rate overflows the forward pass; the divergence
    // abort is a runtime failure, not a config one.
    let diverge = write_cfg(
        dir.path(),
        r#"{
          "version": 1, "seed": 3,
          "teacher": {"steps": 10, "batch": 4, "lr": 1e200,
                      "arch": {"hidden_width": 8, "hidden_layers": 2, "num_frequencies": 2}}
        }"#,
    );
    let out = dir.path().join("out2").display().to_string();
    let result = scot().args(["train-teacher", "--config", &diverge, "--out", &out]).output().unwrap();
    assert_eq!(result.status.code().unwrap(), 2, "{}", String::from_utf8_lossy(&result.stderr));
    assert!(String::from_utf8_lossy(&result.stderr).contains("non-finite"));
}
