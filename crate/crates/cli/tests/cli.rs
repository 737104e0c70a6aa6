//! Harness behavior: error paths, the stats verb against the committed
//! micro dataset, and manifest hygiene.

use diffalloc_cli::{run_verb, Verb};
use std::path::{Path, PathBuf};
use std::process::Command;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf()
}

fn temp_out(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("diffalloc-cli-{name}"));
    std::fs::remove_dir_all(&dir).ok();
    dir
}

#[test]
fn stats_reports_the_frozen_micro_metrics() {
    let root = repo_root();
    let out = temp_out("stats");
    let manifest = run_verb(Verb::Stats, &root.join("configs/micro_stats.toml"), &out).unwrap();
    assert_eq!(manifest.metrics["tq"], 7.18556638094979);
    assert_eq!(manifest.metrics["saco"], 11.0);
    assert_eq!(manifest.metrics["num_trajectories"], 3.0);
    assert_eq!(manifest.metrics["num_transitions"], 12.0);
    let csv = std::fs::read_to_string(out.join("stats.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "num_trajectories,num_transitions,tq,saco");
    assert_eq!(lines.next().unwrap(), "3,12,7.18556638094979,11");
    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn stats_through_the_binary_matches_the_library() {
    let root = repo_root();
    let out = temp_out("stats-bin");
    let status = Command::new(env!("CARGO_BIN_EXE_diffalloc"))
        .args(["stats", "-c"])
        .arg(root.join("configs/micro_stats.toml"))
        .arg("-o")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("stats.csv")).unwrap();
    assert!(csv.contains("3,12,7.18556638094979,11"));
    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn unknown_verb_is_rejected_by_the_binary() {
    let output = Command::new(env!("CARGO_BIN_EXE_diffalloc"))
        .arg("frobnicate")
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("frobnicate"), "stderr: {stderr}");
}

#[test]
fn evaluate_without_models_names_the_missing_prerequisite() {
    let root = repo_root();
    let out = temp_out("eval-missing");
    let err = run_verb(Verb::Evaluate, &root.join("configs/two_user.toml"), &out).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("missing prerequisite artifact"), "got: {msg}");
    assert!(msg.contains("collect"), "got: {msg}");
    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn invalid_config_is_reported_as_such() {
    let out = temp_out("bad-config");
    std::fs::create_dir_all(&out).unwrap();
    let bad = out.join("bad.toml");

    std::fs::write(&bad, "schema_version = 99\nroot_seed = 1\n[scenario]\npaths=[\"x\"]\n")
        .unwrap();
    let err = run_verb(Verb::Stats, &bad, &out).unwrap_err();
    assert!(format!("{err:#}").contains("invalid config"), "{err:#}");

    std::fs::write(&bad, "schema_version = 1\nroot_seed = 1\n[scenario]\n").unwrap();
    let err = run_verb(Verb::Stats, &bad, &out).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("paths or ranges"), "{msg}");

    std::fs::write(&bad, "schema_version = 1\nroot_seed = 1\n[scenario]\npaths=[\"x\"]\nnot_a_field = 3\n").unwrap();
    let err = run_verb(Verb::Stats, &bad, &out).unwrap_err();
    assert!(format!("{err:#}").contains("invalid config"), "{err:#}");

    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn trace_before_training_names_the_missing_model() {
    let root = repo_root();
    let out = temp_out("trace-missing");
    let err = run_verb(Verb::Trace, &root.join("configs/two_user.toml"), &out).unwrap_err();
    let msg = format!("{err:#}");
    assert!(msg.contains("missing prerequisite artifact"), "got: {msg}");
    std::fs::remove_dir_all(&out).ok();
}

#[test]
fn oracle_verb_writes_the_exact_two_user_optimum() {
    let root = repo_root();
    let out = temp_out("oracle");
    let manifest = run_verb(Verb::Oracle, &root.join("configs/two_user.toml"), &out).unwrap();
    let csv = std::fs::read_to_string(out.join("oracle.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "scenario_index,user_count,algorithm,utility,levels"
    );
    let row = lines.next().unwrap();
    assert!(row.starts_with("0,2,exhaustive,"), "row: {row}");
    assert!(row.ends_with(",28 31"), "row: {row}");
    assert!(manifest.metrics["oracle_utility_s0"] > 28.6);
    std::fs::remove_dir_all(&out).ok();
}
