use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY_SOLVE: &str = r#"{
  "kind": "solve",
  "seed": 3,
  "horizon": 0.1,
  "model": { "name": "lq" },
  "sim": { "dt": 0.05, "n_particles": 32, "n_paths": 48 },
  "solver": { "regression_points": 32, "audit_points": 8, "audit_cloud": 8 }
}"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("config.json");
    fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_mfglab")).arg("run").arg(&path).args(args).current_dir(dir).output().unwrap()
}

fn out_arg(dir: &Path, name: &str) -> (PathBuf, String) {
    let p = dir.join(name);
    let s = p.to_str().unwrap().to_string();
    (p, s)
}

#[test]
fn malformed_configs_exit_with_two_and_write_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, o) = out_arg(tmp.path(), "out");
    for bad in ["{ not json", r#"{"kind": "solve", "sim": {"dt": -1}}"#, r#"{"kind": "solve", "colour": 1}"#, r#"{"kind": "solve", "horizon": 0.123}"#] {
        let r = run(tmp.path(), bad, &["--out", &o]);
        assert_eq!(r.status.code(), Some(2), "{bad}: {}", String::from_utf8_lossy(&r.stderr));
        assert!(!out.exists());
        assert!(!tmp.path().join("mfglab-out").exists());
    }
    let r = run(tmp.path(), TINY_SOLVE, &["--out", &o, "--override", "model.params.nope=1"]);
    assert_eq!(r.status.code(), Some(2));
    let r = run(tmp.path(), TINY_SOLVE, &["--out", &o, "--threads", "0"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn tiny_solve_writes_every_artifact_and_matches_the_golden_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, o) = out_arg(tmp.path(), "out");
    let r = run(tmp.path(), TINY_SOLVE, &["--out", &o]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stdout).contains("overall: PASS"));
    for f in ["report.json", "summary.txt", "verdicts.csv", "iterations.csv", "lipschitz.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let got = fs::read(out.join("report.json")).unwrap();
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/solve_report.json");
    if std::env::var_os("MFGLAB_BLESS").is_some() {
        fs::write(&golden, &got).unwrap();
    }
    assert_eq!(String::from_utf8(got).unwrap(), fs::read_to_string(golden).unwrap());
}

#[test]
fn thread_count_does_not_change_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let (out, o) = out_arg(tmp.path(), &format!("t{threads}"));
        let r = run(tmp.path(), TINY_SOLVE, &["--out", &o, "--threads", threads]);
        assert_eq!(r.status.code(), Some(0));
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn flags_override_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, o) = out_arg(tmp.path(), "out");
    let r = run(tmp.path(), TINY_SOLVE, &["--out", &o, "--seed", "11", "--override", "seed=5", "--override", "horizon=0.05"]);
    assert_eq!(r.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 11);
    assert_eq!(report["config"]["horizon"].as_f64(), Some(0.05));
    assert!(report["config"].get("out").is_none());
}

#[test]
fn oracle_compare_reports_the_relative_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, o) = out_arg(tmp.path(), "out");
    let config = TINY_SOLVE.replace("\"solve\"", "\"oracle-compare\"");
    let r = run(tmp.path(), &config, &["--out", &o, "--override", "horizon=0.2"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stdout));
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    let err = report["results"]["oracle"]["max_relative_error"].as_f64().unwrap();
    assert!(err < 0.05);
    assert!(out.join("oracle.csv").exists());
}

#[test]
fn oracle_compare_needs_the_lq_family() {
    let tmp = tempfile::tempdir().unwrap();
    let config = r#"{"kind": "oracle-compare", "model": {"name": "torus_monotone"}}"#;
    assert_eq!(run(tmp.path(), config, &[]).status.code(), Some(2));
}

#[test]
fn blowup_scan_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let (out, o) = out_arg(tmp.path(), "out");
    let config = r#"{
      "kind": "blowup-scan",
      "model": { "name": "blowup_nonmonotone" },
      "scan": { "horizons": [1.0, 1.5], "expect": "blow_up" }
    }"#;
    let r = run(tmp.path(), config, &["--out", &o]);
    let stdout = String::from_utf8_lossy(&r.stdout);
    assert_eq!(r.status.code(), Some(0), "{stdout}");
    assert!(stdout.contains("blow-up detected at t="), "{stdout}");
    assert!(out.join("scan.csv").exists());
}

#[test]
fn defaults_parse_back() {
    let r = Command::new(env!("CARGO_BIN_EXE_mfglab")).arg("defaults").output().unwrap();
    assert_eq!(r.status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let (out, o) = out_arg(tmp.path(), "out");
    let text = String::from_utf8(r.stdout).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["kind"], "solve");
    // the printed defaults are themselves a valid config
    let r = run(tmp.path(), &text, &["--out", &o, "--override", "horizon=0.05", "--override", "sim.n_paths=48", "--override", "sim.n_particles=32"]);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
}
