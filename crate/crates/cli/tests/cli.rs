//! End-to-end behavior of the `mflq` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn mflq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mflq")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Benchmark configuration with some fields replaced, written to `dir`.
fn variant(dir: &TempDir, name: &str, edit: impl FnOnce(&mut Value)) -> String {
    let mut doc: Value = serde_json::from_str(&fs::read_to_string(configs().join("benchmark.json")).unwrap()).unwrap();
    edit(&mut doc);
    let path = dir.path().join(name);
    fs::write(&path, doc.to_string()).unwrap();
    path.display().to_string()
}

fn csv_column(path: &Path, column: &str) -> Vec<String> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == column).unwrap_or_else(|| panic!("no column {column} in {header:?}"));
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn every_shipped_config_validates() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let out = mflq(&["validate", "--config", &path.display().to_string()]);
        assert_eq!(code(&out), 0, "{}: {}", path.display(), String::from_utf8_lossy(&out.stdout));
    }
}

#[test]
fn indefinite_state_weight_is_an_assumption_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = variant(&dir, "q.json", |d| d["shared"]["Q"] = (-1.0).into());
    let out = mflq(&["validate", "--config", &cfg]);
    assert_eq!(code(&out), 2);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("(Q at t = 0"), "{text}");
    let sim = mflq(&["simulate", "--config", &cfg, "--out", &dir.path().join("o").display().to_string(), "--paths", "2"]);
    assert_eq!(code(&sim), 2);
}

#[test]
fn malformed_and_missing_configs_are_parse_failures() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"dims\": {\"n\": 1,").unwrap();
    let out = mflq(&["validate", "--config", &bad.display().to_string()]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
    let shape = variant(&dir, "shape.json", |d| d["shared"]["B"] = serde_json::json!([[1.0], [2.0]]));
    let out = mflq(&["validate", "--config", &shape]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("shared.B"), "{}", stderr(&out));
    let missing = dir.path().join("absent.json");
    assert_eq!(code(&mflq(&["validate", "--config", &missing.display().to_string()])), 3);
}

#[test]
fn solve_mf_reports_residuals_and_diagnostics() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("bench");
    let out = mflq(&["solve-mf", "--config", &config("benchmark.json"), "--out", &out_dir.display().to_string()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert!(report["fixed_point_residual"].as_f64().unwrap() <= 1e-6);
    assert!(out_dir.join("riccati.csv").exists());

    let zero = dir.path().join("zero");
    let out = mflq(&["solve-mf", "--config", &config("zero_coupling.json"), "--out", &zero.display().to_string()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(csv_column(&zero.join("meanfield.csv"), "theta_1").iter().all(|v| v.parse::<f64>().unwrap() == 0.0));

    let constant = dir.path().join("constant");
    let out = mflq(&["solve-mf", "--config", &config("deterministic.json"), "--out", &constant.display().to_string()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&fs::read_to_string(constant.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cross_method"]["methods"].as_array().unwrap().len(), 3);
    assert!(report["cross_method"]["max_deviation"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn riccati_failure_exits_with_its_code_and_time() {
    let dir = TempDir::new().unwrap();
    let cfg = variant(&dir, "hot.json", |d| {
        d["types"][0]["A"] = 300.0.into();
        d["grid"]["steps"] = 10.into();
    });
    let out = mflq(&["solve-mf", "--config", &cfg, "--out", &dir.path().join("o").display().to_string()]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("t = "), "{}", stderr(&out));
}

#[test]
fn simulation_blow_up_names_agent_path_and_node() {
    let dir = TempDir::new().unwrap();
    let cfg = variant(&dir, "blow.json", |d| {
        d["types"][0]["sigma"] = serde_json::json!([1e308]);
        d["types"][0]["A"] = 1.0.into();
        d["shared"]["D"] = 0.0.into();
        d["grid"]["steps"] = 4.into();
    });
    let out = mflq(&["simulate", "--config", &cfg, "--out", &dir.path().join("o").display().to_string(), "--paths", "3", "--N", "3"]);
    assert_eq!(code(&out), 5);
    let msg = stderr(&out);
    assert!(msg.contains("agent") && msg.contains("path") && msg.contains("node"), "{msg}");
}

#[test]
fn simulate_is_reproducible_and_replayable() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let out = mflq(&[
            "simulate",
            "--config",
            &config("benchmark.json"),
            "--out",
            &out_dir.display().to_string(),
            "--N",
            "12",
            "--paths",
            "40",
            "--seed",
            seed,
            "--record",
            "2,3",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out_dir
    };
    let (a, b, c) = (run("a", "7"), run("b", "7"), run("c", "8"));
    for file in ["costs.csv", "agents.csv", "trajectory.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    assert_ne!(fs::read(a.join("costs.csv")).unwrap(), fs::read(c.join("costs.csv")).unwrap());
    assert_eq!(csv_column(&a.join("agents.csv"), "agent").len(), 12);
    assert_eq!(csv_column(&a.join("trajectory.csv"), "t").len(), 101);

    let manifest: Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["request"]["command"], "simulate");
    assert_eq!(manifest["request"]["seed"], 7);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
    let replayed = dir.path().join("replayed");
    let out = mflq(&["replay", "--manifest", &a.join("manifest.json").display().to_string(), "--out", &replayed.display().to_string()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for file in ["costs.csv", "agents.csv", "trajectory.csv"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(replayed.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn tampered_manifest_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("run");
    let out = mflq(&["solve-mf", "--config", &config("benchmark.json"), "--out", &out_dir.display().to_string()]);
    assert_eq!(code(&out), 0);
    let path = out_dir.join("manifest.json");
    let mut manifest: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    manifest["config"] = manifest["config"].as_str().unwrap().replace("0.3", "0.4").into();
    fs::write(&path, manifest.to_string()).unwrap();
    let out = mflq(&["replay", "--manifest", &path.display().to_string()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn noiseless_simulation_has_zero_standard_errors() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("det");
    let out = mflq(&["simulate", "--config", &config("deterministic.json"), "--out", &out_dir.display().to_string(), "--paths", "25"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for col in ["stderr", "stderr_per_agent", "meanfield_stderr"] {
        assert!(csv_column(&out_dir.join("costs.csv"), col).iter().all(|v| v.parse::<f64>().unwrap() == 0.0), "{col}");
    }
}

#[test]
fn converge_writes_rates_and_flags_the_floor() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("floor");
    let out = mflq(&[
        "converge",
        "--config",
        &config("deterministic.json"),
        "--out",
        &out_dir.display().to_string(),
        "--N-list",
        "4,8,16",
        "--paths",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(csv_column(&out_dir.join("slopes.csv"), "status"), vec!["floor", "floor"]);
    assert_eq!(csv_column(&out_dir.join("rate.csv"), "N"), vec!["4", "8", "16"]);

    let noisy = dir.path().join("noisy");
    let out = mflq(&[
        "converge",
        "--config",
        &config("benchmark.json"),
        "--out",
        &noisy.display().to_string(),
        "--N-list",
        "5,10",
        "--paths",
        "50",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(csv_column(&noisy.join("slopes.csv"), "status"), vec!["fit", "fit"]);
    let directions = csv_column(&noisy.join("gaps.csv"), "direction");
    assert_eq!(directions.len(), 2 * 6);
}

#[test]
fn converge_rejects_sizes_that_miss_the_type_distribution() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("eps").display().to_string();
    let args = ["converge", "--config", &config("two_types.json"), "--out", &out_dir, "--N-list", "4,5", "--paths", "4"];
    let out = mflq(&args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("N = 5"), "{}", stderr(&out));
    let mut allowed = args.to_vec();
    allowed.push("--allow-epsN");
    let out = mflq(&allowed);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let eps = csv_column(&dir.path().join("eps").join("rate.csv"), "eps_N");
    assert_eq!(eps[0].parse::<f64>().unwrap(), 0.0);
    assert!((eps[1].parse::<f64>().unwrap() - 0.1).abs() < 1e-12);
}

#[test]
fn oracle_compare_checks_bounds_and_reports_the_verdict() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("dec");
    let out = mflq(&["oracle-compare", "--config", &config("decoupled.json"), "--out", &out_dir.display().to_string(), "--paths", "200"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(csv_column(&out_dir.join("oracle.csv"), "pass"), vec!["true"]);
    let rel: f64 = csv_column(&out_dir.join("oracle.csv"), "relative_gap")[0].parse().unwrap();
    assert!((0.0..=1e-3).contains(&rel), "{rel}");
    let controls = csv_column(&out_dir.join("tree_controls.csv"), "optimal");
    assert_eq!(controls.len(), 2 * (1 + 4 + 16 + 64 + 256));

    let big = mflq(&["oracle-compare", "--config", &config("benchmark.json"), "--out", &dir.path().join("big").display().to_string()]);
    assert_eq!(code(&big), 6);
    let steps = mflq(&[
        "oracle-compare",
        "--config",
        &config("coupled_tree.json"),
        "--out",
        &dir.path().join("steps").display().to_string(),
        "--tree-steps",
        "9",
    ]);
    assert_eq!(code(&steps), 6);
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("x").display().to_string();
    let out = mflq(&["solve-mf", "--config", &config("benchmark.json"), "--out", &out_dir, "--riccati-method", "newton"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&mflq(&["simulate", "--config", &config("benchmark.json")])), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_mflq"))
        .args(["validate", "--config", &config("benchmark.json")])
        .env("MFLQ_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    let out = mflq(&["simulate", "--config", &config("benchmark.json"), "--out", &out_dir, "--paths", "3", "--record", "99,1"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn requested_riccati_method_is_used() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("m");
    let out = mflq(&[
        "solve-mf",
        "--config",
        &config("deterministic.json"),
        "--out",
        &out_dir.display().to_string(),
        "--riccati-method",
        "exponential",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["riccati_method"], "exponential");
    let out = mflq(&[
        "solve-mf",
        "--config",
        &config("benchmark.json"),
        "--out",
        &out_dir.display().to_string(),
        "--riccati-method",
        "fundamental",
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}
