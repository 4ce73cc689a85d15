//! Command-line behaviour of the `aquarius` binary.

use aquarius_core::experiment::RunError;
use std::path::Path;
use std::process::{Command, Output};

fn aquarius(args: &[&str], log: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_aquarius"));
    cmd.args(args).env_remove("AQUARIUS_LOG");
    if let Some(l) = log {
        cmd.env("AQUARIUS_LOG", l);
    }
    cmd.output().unwrap()
}

fn run_args<'a>(out: &'a Path, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["run", "--rate", "80", "--duration", "3", "--out", out.to_str().unwrap()];
    v.extend_from_slice(extra);
    v
}

#[test]
fn run_writes_outputs_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = aquarius(&run_args(dir.path(), &["--policy", "aquarius", "--estimator", "oracle"]), None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.json", "metrics.csv", "features.csv", "stats.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("jain"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for extra in [
        vec!["--servers", "6y2"],
        vec!["--estimator", "linear"],
        vec!["--frame-ms", "300"],
        vec!["--rate=-5"],
        vec!["--estimator", "linear", "--model", "/nonexistent/model.csv"],
    ] {
        let o = aquarius(&run_args(dir.path(), &extra), None);
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!o.stderr.is_empty());
    }
    let o = aquarius(&["run", "--config", "/nonexistent/config.json"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"trace":{"kind":"file","rate_qps":50,"duration":2},"servers":"2x2","policy":"maglev","estimator":"off","seed":3}"#,
    )
    .unwrap();
    let out = dir.path().join("o");
    let o =
        aquarius(&["run", "--config", cfg.to_str().unwrap(), "--servers", "3x4", "--out", out.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["servers"], "3x4");
    assert_eq!(report["config"]["policy"], "maglev");
    assert_eq!(report["config"]["trace"]["kind"], "file");
    assert_eq!(report["servers"].as_array().unwrap().len(), 3);
}

#[test]
fn export_writes_dataset_only() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = run_args(dir.path(), &[]);
    args[0] = "export";
    let o = aquarius(&args, None);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("features.csv").is_file());
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn bench_reports_json() {
    let o = aquarius(&["bench", "--flows", "2000", "--repeat", "2", "--json"], None);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["median_ns_per_packet"].as_f64().unwrap() > 0.0);
    assert_eq!(aquarius(&["bench", "--flows", "0"], None).status.code(), Some(2));
}

#[test]
fn log_level_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let quiet = aquarius(&run_args(dir.path(), &[]), None);
    let chatty = aquarius(&run_args(dir.path(), &[]), Some("info"));
    assert!(!String::from_utf8_lossy(&quiet.stderr).contains("INFO"));
    assert!(String::from_utf8_lossy(&chatty.stderr).contains("INFO"));
}

#[test]
fn exit_codes_by_error_kind() {
    assert_eq!(RunError::Config("x".into()).exit_code(), 2);
    assert_eq!(RunError::Invariant("x".into()).exit_code(), 3);
}
