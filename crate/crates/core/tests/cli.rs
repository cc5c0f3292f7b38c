use std::path::Path;
use std::process::{Command, Output};

const SMALL: [&str; 6] = ["--n-traj", "16", "--horizon", "30", "--instances", "4"];

fn exoplan(out_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exoplan"))
        .args(args)
        .arg("--out-dir")
        .arg(out_dir)
        .args(SMALL)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

fn run_ok(out_dir: &Path, args: &[&str]) {
    let out = exoplan(out_dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_pipeline_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["generate-env", "collect", "train-model", "plan", "evaluate"] {
        run_ok(dir.path(), &[stage]);
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("schema_version,"));
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&exoplan(dir.path(), &["generate-env", "--no-such-flag"])), 2);
    assert_eq!(code(&exoplan(dir.path(), &["generate-env", "--gamma", "1.5"])), 2);
    assert_eq!(code(&exoplan(dir.path(), &["verify-theory", "--checks", ""])), 2);
    assert_eq!(code(&exoplan(dir.path(), &["collect", "--tier", "expert"])), 2);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"n_endo": 4, "not_a_field": 1}"#).unwrap();
    assert_eq!(code(&exoplan(dir.path(), &["generate-env", "--config", cfg.to_str().unwrap()])), 2);
    assert_eq!(code(&exoplan(dir.path(), &["generate-env", "--config", "/nonexistent/cfg.json"])), 2);
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&exoplan(dir.path(), &["collect"])), 3);
    run_ok(dir.path(), &["generate-env"]);
    run_ok(dir.path(), &["collect"]);
    let out = exoplan(dir.path(), &["evaluate"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("plan"));
}

#[test]
fn regenerated_environment_is_a_fingerprint_error() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["generate-env", "collect", "train-model", "plan"] {
        run_ok(dir.path(), &[stage]);
    }
    run_ok(dir.path(), &["generate-env", "--env-seed", "99"]);
    let out = exoplan(dir.path(), &["evaluate"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn learner_stages_run_without_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(dir.path(), &["generate-env"]);
    run_ok(dir.path(), &["collect"]);
    let env = dir.path().join("env.json");
    let hidden = dir.path().join("env.hidden");
    std::fs::rename(&env, &hidden).unwrap();
    run_ok(dir.path(), &["train-model"]);
    run_ok(dir.path(), &["plan"]);
    assert_eq!(code(&exoplan(dir.path(), &["evaluate"])), 3);
    std::fs::rename(&hidden, &env).unwrap();
    run_ok(dir.path(), &["evaluate"]);
}

#[test]
fn theory_checks_pass_and_injected_violation_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let ok = exoplan(dir.path(), &["verify-theory"]);
    assert_eq!(code(&ok), 0);
    let stdout = String::from_utf8_lossy(&ok.stdout);
    for check in ["telescoping", "performance_bound", "sampling_likelihood", "mixture_mi"] {
        assert!(stdout.contains(&format!("PASS {check}")), "{stdout}");
    }
    assert!(dir.path().join("theory/summary.json").exists());
    let bad = Command::new(env!("CARGO_BIN_EXE_exoplan"))
        .args(["verify-theory", "--checks", "performance_bound", "--instances", "20", "--inject-violation", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL performance_bound"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"seed": 5, "n_traj": 9, "grid": {"seeds": 3}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_exoplan"))
        .args(["generate-env", "--config", cfg.to_str().unwrap(), "--seed", "6", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_exoplan"))
        .args(["collect", "--config", cfg.to_str().unwrap(), "--seed", "6", "--horizon", "12", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("datasets/random.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["seed"], 6);
    assert_eq!(header["n_trajectories"], 9);
    assert_eq!(header["horizon"], 12);
}

#[test]
fn ablation_grid_writes_rows_and_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_exoplan"))
        .args(["ablate", "--grid-schedules", "cs,rs", "--grid-models", "separated,joint", "--grid-seeds", "4"])
        .args(["--n-traj", "16", "--horizon", "30", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let kinds: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(kinds.iter().filter(|k| **k == "data").count(), 16);
    assert_eq!(kinds.iter().filter(|k| **k == "mean").count(), 4);
    assert_eq!(kinds.iter().filter(|k| **k == "std").count(), 4);
}
