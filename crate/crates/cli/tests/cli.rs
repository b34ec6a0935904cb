use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn bpme(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpme"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("BPME_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, text).unwrap();
    path
}

fn error_record(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("stderr carries a JSON record")
}

fn files_with(dir: &Path, prefix: &str) -> Vec<PathBuf> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    v.sort();
    v
}

const SMALL: &str = r#"{
  "environment": {
    "states": [
      {"label": "good", "offspring": {"family": "geometric", "mean": 2.0}},
      {"label": "bad", "offspring": {"family": "geometric", "mean": 0.5}}
    ],
    "kernel": [[0.5, 0.5], [0.5, 0.5]]
  },
  "horizons": [64, 256],
  "replicates": {"simulate": 4, "min_survivors": 10000, "bootstrap": 50},
  "seed": 42
}"#;

#[test]
fn analyze_reports_a_critical_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = bpme(&configs().join("two_state_iid.json"), dir.path(), &["analyze"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["report"]["classification"], "critical");
    assert!((v["sigma"].as_f64().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(files_with(dir.path(), "analyze-").len(), 1);
}

#[test]
fn bad_row_sum_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("[0.5, 0.5]]", "[0.6, 0.5]]"));
    let out = bpme(&cfg, dir.path(), &["analyze"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "ValidationError");
    let field = rec["field"].as_str().unwrap();
    assert!(field.contains("kernel[1]") && field.contains("bad"), "{field}");
}

#[test]
fn sure_survival_state_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(r#"{"family": "geometric", "mean": 0.5}"#, r#"{"family": "explicit", "pmf": {"0": 0.5, "1": 0.5}}"#);
    let out = bpme(&write_config(dir.path(), &text), dir.path(), &["analyze"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "ValidationError");
    assert!(rec["field"].as_str().unwrap().contains("bad"));
    assert!(rec["message"].as_str().unwrap().contains("Condition 4"));
}

#[test]
fn syntax_error_has_a_position() {
    let dir = tempfile::tempdir().unwrap();
    let out = bpme(&write_config(dir.path(), "{\n  \"environment\": [,\n}"), dir.path(), &["analyze"]);
    assert_eq!(out.status.code(), Some(2));
    let rec = error_record(&out);
    assert_eq!(rec["error"], "ParseError");
    assert_eq!(rec["line"], 2);
}

#[test]
fn missing_config_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bpme(&dir.path().join("nope.json"), dir.path(), &["analyze"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "IoError");
}

#[test]
fn unknown_theorem_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bpme(&write_config(dir.path(), SMALL), dir.path(), &["theorem", "9.9"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"], "UsageError");
}

#[test]
fn identities_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = bpme(&configs().join("three_state.json"), dir.path(), &["verify-identities"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report: Value = serde_json::from_str(&fs::read_to_string(&files_with(dir.path(), "identities-")[0]).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn simulate_writes_one_csv_per_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let out = bpme(&write_config(dir.path(), SMALL), dir.path(), &["simulate"]);
    assert!(out.status.success());
    let files = files_with(dir.path(), "trajectory-");
    assert_eq!(files.len(), 4);
    for f in &files {
        let text = fs::read_to_string(f).unwrap();
        assert!(!text.contains('\r'));
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("config_hash,step,x,z,s"));
        let first = lines.next().unwrap();
        assert!(first.ends_with(",0,good,1,0.0"), "{first}");
        let hash = first.split(',').next().unwrap();
        assert!(f.to_string_lossy().contains(hash));
        assert!(text.lines().count() <= 258);
    }
}

#[test]
fn theorem_output_is_reproducible_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let read = |sub: &str, threads: &str| {
        let out_dir = dir.path().join(sub);
        let out = bpme(&cfg, &out_dir, &["--seed", "42", "--threads", threads, "theorem", "1.3"]);
        assert!(out.status.code().unwrap() <= 1, "{}", String::from_utf8_lossy(&out.stderr));
        let csv = files_with(&out_dir, "theorem-1.3-").into_iter().find(|p| p.extension().unwrap() == "csv").unwrap();
        fs::read(csv).unwrap()
    };
    let a = read("a", "2");
    assert_eq!(a, read("b", "2"));
    assert_eq!(a, read("c", "1"));
}

#[test]
fn seed_override_changes_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let hash = |args: &[&str]| {
        let out = bpme(&cfg, dir.path(), args);
        let v: Value = serde_json::from_slice(&out.stdout).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    let base = hash(&["analyze"]);
    assert_eq!(base, hash(&["--seed", "42", "analyze"]));
    assert_ne!(base, hash(&["--seed", "7", "analyze"]));
}

#[test]
fn calibrate_emits_a_critical_config() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(r#""mean": 0.5"#, r#""mean": 0.4"#);
    let out = bpme(&write_config(dir.path(), &text), dir.path(), &["calibrate", "--state", "bad"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cal = files_with(dir.path(), "calibrated-");
    let cfg = cal[0].clone();
    let again = bpme(&cfg, dir.path(), &["analyze"]);
    let v: Value = serde_json::from_slice(&again.stdout).unwrap();
    assert_eq!(v["report"]["classification"], "critical");
}
