use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn simtool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simtool")).args(args).output().expect("spawn simtool")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bs");
    let o = simtool(&["run", "blackstart", "--duration", "0.3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace.csv", "trace.csv.meta.json", "summary.json", "config.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["scenario"], "blackstart");
    assert!(m["config_hash"].as_str().unwrap().starts_with("sha256:"));
    assert!(m["started"].is_string() && m["finished"].is_string());
    assert_eq!(m["outputs"]["trace"], "trace.csv");
    let s = read_json(&out.join("summary.json"));
    assert_eq!(s["converters"].as_array().unwrap().len(), 1);
    let header = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(header.starts_with("time,"));
}

#[test]
fn seedless_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|n| {
            let out = dir.path().join(n);
            let o = simtool(&["run", "sync", "--duration", "1.2", "--seedless", "--out", out.to_str().unwrap()]);
            assert_eq!(code(&o), 0);
            out
        })
        .collect();
    for f in ["trace.csv", "trace.csv.meta.json", "summary.json", "manifest.json"] {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        let b = std::fs::read(runs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let m = read_json(&runs[0].join("manifest.json"));
    assert!(m.get("started").is_none());
}

#[test]
fn equivalent_configs_share_a_hash() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    std::fs::write(&a, r#"{"duration": 0.2, "overrides": {"alpha": 1000}}"#).unwrap();
    std::fs::write(&b, r#"{"converters": [{"droop": {"alpha": 1000.0}}], "duration": 0.20}"#).unwrap();
    let hash = |cfg: &Path, name: &str| {
        let out = dir.path().join(name);
        let o = simtool(&["run", "loadstep", "--config", cfg.to_str().unwrap(), "--seedless", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        (read_json(&out.join("manifest.json"))["config_hash"].clone(), out)
    };
    let (ha, out_a) = hash(&a, "ra");
    let (hb, _) = hash(&b, "rb");
    assert_eq!(ha, hb);
    let (hc, _) = hash(&out_a.join("config.json"), "rc");
    assert_eq!(ha, hc);
    std::fs::write(&b, r#"{"duration": 0.2, "overrides": {"alpha": 1001}}"#).unwrap();
    let (hd, _) = hash(&b, "rd");
    assert_ne!(ha, hd);
}

#[test]
fn export_round_trip_preserves_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = simtool(&["run", "loadstep", "--duration", "0.1", "--seedless", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let json = dir.path().join("t.json");
    let csv = dir.path().join("back.csv");
    assert_eq!(code(&simtool(&["export", out.join("trace.csv").to_str().unwrap(), "--format", "json", "--out", json.to_str().unwrap()])), 0);
    assert_eq!(code(&simtool(&["export", json.to_str().unwrap(), "--format", "csv", "--out", csv.to_str().unwrap()])), 0);
    assert_eq!(std::fs::read(out.join("trace.csv")).unwrap(), std::fs::read(&csv).unwrap());
    let doc = read_json(&json);
    assert_eq!(doc["scenario"], "loadstep");
    assert_eq!(doc["schema_version"], "1.0");

    let sub = dir.path().join("sub.csv");
    let o = simtool(&["export", json.to_str().unwrap(), "--format", "csv", "--out", sub.to_str().unwrap(), "--channels", "p_1,omega_1"]);
    assert_eq!(code(&o), 0);
    assert!(std::fs::read_to_string(&sub).unwrap().starts_with("time,p_1,omega_1\n"));
    let o = simtool(&["export", json.to_str().unwrap(), "--format", "csv", "--out", sub.to_str().unwrap(), "--channels", "nope"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn check_passes_on_loadstep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ls");
    let o = simtool(&["run", "loadstep", "--check", "--seedless", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("[PASS] criterion  3"));
    assert_eq!(read_json(&out.join("manifest.json"))["checks_passed"], true);
}

#[test]
fn failing_check_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sy");
    let o = simtool(&["run", "sync", "--check", "--seedless", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stdout(&o));
    assert!(stdout(&o).contains("[FAIL] criterion  5"));
    let checks = read_json(&out.join("checks.json"));
    assert!(checks.as_array().unwrap().iter().any(|c| c["passed"] == false));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&simtool(&["run", "nope"])), 1);
    assert_eq!(code(&simtool(&["run", "custom"])), 1);
    assert_eq!(code(&simtool(&["frobnicate"])), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"converters": [{"droop": {"alpha": -1}}]}"#).unwrap();
    let o = simtool(&["run", "blackstart", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
    std::fs::write(&bad, r#"{"preset": "sync"}"#).unwrap();
    assert_eq!(code(&simtool(&["run", "blackstart", "--config", bad.to_str().unwrap()])), 1);
    assert_eq!(code(&simtool(&["export", "/nonexistent.csv", "--format", "json", "--out", "/tmp/x.json"])), 1);
}

#[test]
fn aborted_run_exits_one_and_keeps_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"plant_dt": 1e-3, "controller_ts": 1e-3, "duration": 20}"#).unwrap();
    let out = dir.path().join("ab");
    let o = simtool(&["run", "blackstart", "--config", cfg.to_str().unwrap(), "--seedless", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(read_json(&out.join("summary.json"))["aborted"].is_object());
}

#[test]
fn sweep_writes_one_report_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let o = simtool(&[
        "run", "sweep", "--param", "alpha", "--values", "500,1000,2000", "--check", "--seedless", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    for v in ["500", "1000", "2000"] {
        assert!(out.join(format!("alpha={v}")).join("summary.json").exists());
    }
    let entries = read_json(&out.join("sweep.json"));
    let depth: Vec<f64> = entries.as_array().unwrap().iter().map(|e| e["nadir_depth"].as_f64().unwrap()).collect();
    assert!(depth[0] > depth[1] && depth[1] > depth[2], "{depth:?}");
    assert!(stdout(&o).contains("nadir trend"));
}

#[test]
fn json_trace_format() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("j");
    let o = simtool(&["run", "blackstart", "--duration", "0.05", "--format", "json", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let doc = read_json(&out.join("trace.json"));
    assert!(doc["created"].is_string());
    assert!(doc["data"]["p_1"].is_array());
}
