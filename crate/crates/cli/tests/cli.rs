use std::path::Path;
use std::process::{Command, Output};

fn dmdenkf(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmdenkf"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

/// Data rows of an echo CSV, header line included.
fn rows(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config: {"), "{} lacks the config echo", path.display());
    lines.map(str::to_string).collect()
}

#[test]
fn method_subset_limits_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmdenkf(&["synth-eig", "--runs", "2", "--sigma", "0.5", "--methods", "dmdenkf,streaming"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = rows(&dir.path().join("synth_eig_summary.csv"));
    assert_eq!(summary[0], "method,sigma,metric,value,n_runs,seed_base");
    let methods: std::collections::BTreeSet<&str> = summary[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(methods.into_iter().collect::<Vec<_>>(), ["dmdenkf", "streaming"]);
    let listed = String::from_utf8(out.stdout).unwrap();
    assert_eq!(listed.lines().count(), 3);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dmdenkf(&["synth-eig", "--runs", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(dmdenkf(&["synth-pandemic", "--methods", "kalman"], dir.path()).status.code(), Some(2));
    assert_eq!(dmdenkf(&["ili", "--rank-sweep", "9..3"], dir.path()).status.code(), Some(2));
}

#[test]
fn missing_data_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dmdenkf(&["ili", "--data", "/nonexistent/ili.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"runs": 5, "sigma": [0.05], "methods": ["online"]}"#).unwrap();
    let out = dmdenkf(&["synth-pandemic", "--config", cfg.to_str().unwrap(), "--runs", "2"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let per_run = rows(&dir.path().join("pandemic_runs.csv"));
    assert_eq!(per_run.len(), 1 + 2);
    assert!(per_run[1..].iter().all(|r| r.starts_with("online,0.05,")));

    std::fs::write(&cfg, r#"{"runz": 5}"#).unwrap();
    assert_eq!(dmdenkf(&["synth-pandemic", "--config", cfg.to_str().unwrap()], dir.path()).status.code(), Some(2));
}

#[test]
fn exported_fixture_feeds_the_ili_command() {
    let dir = tempfile::tempdir().unwrap();
    assert!(dmdenkf(&["export-ili-fixture"], dir.path()).status.success());
    let data = dir.path().join("ili_fixture.csv");
    let census = dir.path().join("ili_fixture_census.csv");
    let run = dir.path().join("run");
    let out = dmdenkf(
        &["ili", "--data", data.to_str().unwrap(), "--census", census.to_str().unwrap(), "--rank-sweep", "4..12"],
        &run,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sweep = rows(&run.join("ili_rank_sweep.csv"));
    assert_eq!(sweep.len(), 1 + 9);
    let forecasts = rows(&run.join("ili_forecasts.csv"));
    assert!(forecasts.len() > 1);
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("ili_metrics.json")).unwrap()).unwrap();
    assert!(metrics["config"].get("out").is_none());
    assert_eq!(metrics["metrics"].as_array().unwrap().len(), 5);
}
