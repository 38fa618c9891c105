use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_sepbart");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

const DATA: &str = r#"
[data]
input = "sim/data.csv"
covariates = ["x1", "x2", "x3", "x4", "x5"]
exposures = ["w1", "w2", "w3", "w4", "w5"]
[simulate]
scenario = "strong"
n = 500
truth_draws = 5000
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    std::fs::write(dir.join("run.toml"), format!("seed = 7\n{DATA}{extra}")).unwrap();
    "run.toml".into()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "");
    ok(dir.path(), &["simulate", "--config", &c, "--out", "a"]);
    ok(dir.path(), &["simulate", "--config", &c, "--out", "b", "--threads", "1"]);
    for f in ["data.csv", "truth.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let t = json(dir.path().join("a/truth.json"));
    assert_eq!(t["provenance"]["seed"], 7);
    assert_eq!(t["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    let csv = std::fs::read_to_string(dir.path().join("a/data.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with("config_hash,seed"));
    assert_eq!(csv.lines().count(), 501);
}

#[test]
fn fit_estimate_diagnose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(
        dir.path(),
        "[fit]\niterations = 1000\nburn_in = 500\nthin = 2\n",
    );
    ok(dir.path(), &["simulate", "--config", &c, "--out", "sim"]);
    ok(dir.path(), &["fit", "--config", &c, "--out", "fit", "--chains", "2"]);
    let chains = ["fit/chain_0.jsonl", "fit/chain_1.jsonl"];
    let before: Vec<Vec<u8>> = chains.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();

    let mut args = vec!["estimate", "--config", &c, "--out", "est", "--draws"];
    args.extend(chains);
    ok(dir.path(), &args);
    let e = json(dir.path().join("est/estimate.json"));
    let raw: Vec<f64> = e["vim"]["psi_raw_mean"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(raw.len(), 5);
    let sum: f64 = raw.iter().sum();
    assert!((0.8..=1.2).contains(&sum), "raw psi sum {sum}");

    // the same contrast written out explicitly
    let w0 = e["contrast"]["w0"].to_string();
    let w1 = e["contrast"]["w1"].to_string();
    let mut args = vec![
        "estimate".to_string(),
        "--config".into(),
        c.clone(),
        "--out".into(),
        "est2".into(),
        "--set".into(),
        format!("contrast.w0={w0}"),
        "--set".into(),
        format!("contrast.w1={w1}"),
        "--draws".into(),
    ];
    args.extend(chains.iter().map(|s| s.to_string()));
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(dir.path(), &args);
    let e2 = json(dir.path().join("est2/estimate.json"));
    let close = |a: &Value, b: &Value| (a.as_f64().unwrap() - b.as_f64().unwrap()).abs() <= 1e-12;
    assert!(close(&e["ate"]["mean"], &e2["ate"]["mean"]));
    for u in 0..5 {
        assert!(close(&e["vim"]["psi_raw_mean"][u], &e2["vim"]["psi_raw_mean"][u]));
    }
    assert_ne!(e["provenance"]["config_hash"], e2["provenance"]["config_hash"]);

    let mut args = vec!["diagnose", "--config", &c, "--out", "diag", "--draws"];
    args.extend(chains);
    ok(dir.path(), &args);
    let d = json(dir.path().join("diag/diagnose.json"));
    assert!(d["psrf"]["ate"].as_f64().unwrap() >= 0.0);
    assert!(d["trimmed_ate"]["kept"].as_u64().unwrap() > 0);

    let after: Vec<Vec<u8>> = chains.iter().map(|f| std::fs::read(dir.path().join(f)).unwrap()).collect();
    assert_eq!(before, after, "draw files were modified");
}

#[test]
fn config_errors_list_every_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "colour = 1\n[fit]\nthin = 0\nrho = \"wide\"\n[contrast]\nw0 = \"p10\"\n",
    )
    .unwrap();
    let out = run(dir.path(), &["fit", "--config", "bad.toml", "--set", "estimate.alpha=3"]);
    assert_eq!(out.status.code(), Some(2));
    let rec: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["kind"], "config");
    let problems = rec["problems"].to_string();
    for key in ["colour", "fit.thin", "fit.rho", "contrast.w0", "estimate.alpha"] {
        assert!(problems.contains(key), "{key} not reported: {problems}");
    }
}

#[test]
fn missing_draw_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "");
    ok(dir.path(), &["simulate", "--config", &c, "--out", "sim"]);
    let out = run(dir.path(), &["estimate", "--config", &c, "--draws", "nope.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let rec: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(rec["status"], "error");
    assert!(!dir.path().join("out/estimate.json").exists());
}

#[test]
fn study_writes_report_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("s.toml"),
        "seed = 3\n[fit]\niterations = 40\nburn_in = 20\nthin = 1\ntrees_f = 5\ntrees_g = 5\ntrees_h = 3\n\
         [study]\nscenario = \"none\"\nn = 100\nreplicates = 2\ntest_points = 10\ntruth_draws = 1000\n",
    )
    .unwrap();
    ok(dir.path(), &["study", "--config", "s.toml", "--out", "st"]);
    let s = json(dir.path().join("st/study.json"));
    assert_eq!(s["replicates"].as_array().unwrap().len(), 2);
    assert_eq!(s["truth"]["phi"], 0.0);
    let rows = std::fs::read_to_string(dir.path().join("st/replicates.csv")).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(dir.path().join("st/rejection.csv").exists());
}
