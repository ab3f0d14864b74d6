use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

const SMALL_CONFIG: &str = r#"{
    "synth": {"days": 14},
    "train": {"channels": [4], "n_e": 4, "d_k": 4, "z_prime": 4, "hidden": 8, "batch_size": 32},
    "pipeline": {"min_samples": 10}
}"#;

/// Runs the binary inside `dir` and returns its exit code.
fn evhc(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_evhc")).args(args).current_dir(dir).output().expect("binary runs");
    out.status.code().expect("exit code")
}

fn small_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.json"), SMALL_CONFIG).unwrap();
    dir
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn csv_rows(path: PathBuf) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(&path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(evhc(dir.path(), &["--help"]), 0);
    assert_eq!(evhc(dir.path(), &["no-such-command"]), 2);
    assert_eq!(evhc(dir.path(), &["assess", "--varsigma", "abc"]), 2);
}

#[test]
fn default_dataset_shape_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        assert_eq!(evhc(d.path(), &["gen-data", "--out", "run", "--seed", "7"]), 0);
    }
    let manifest = read_json(a.path().join("run/data/manifest.json"));
    assert_eq!(manifest["stations"].as_array().unwrap().len(), 12);
    assert_eq!(manifest["n_slots"], 365 * 96);
    assert!(manifest["seed"].is_u64());
    let series = csv_rows(a.path().join("run/data/series.csv"));
    assert_eq!(series.len(), 12 * 365 * 96);
    for name in ["data/series.csv", "data/series_kw.csv", "data/transactions.csv", "data/manifest.json"] {
        let x = fs::read(a.path().join("run").join(name)).unwrap();
        let y = fs::read(b.path().join("run").join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
    assert!(a.path().join("run/resolved_config.json").exists());
}

#[test]
fn validation_and_data_errors_map_to_exit_codes() {
    let dir = small_workspace();
    let p = dir.path();
    assert_eq!(evhc(p, &["gen-data", "--days", "0", "--out", "o"]), 2);
    assert_eq!(evhc(p, &["train", "--out", "empty"]), 3);
    assert_eq!(evhc(p, &["assess", "--varsigma", "0", "--out", "o"]), 2);
    assert_eq!(evhc(p, &["assess", "--varsigma", "1.5", "--out", "o"]), 2);
    assert_eq!(evhc(p, &["assess", "--epsilon", "0.002", "--out", "o"]), 5);
    assert_eq!(evhc(p, &["--config", "absent.json", "assess", "--out", "o"]), 2);
    fs::write(p.join("broken.json"), "{ not json").unwrap();
    assert_eq!(evhc(p, &["--config", "broken.json", "assess", "--out", "o"]), 2);
}

#[test]
fn bundled_assessment_reports_twelve_capacities() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(evhc(dir.path(), &["assess", "--compare", "--out", "o"]), 0);
    let o = dir.path().join("o");
    let sol = read_json(o.join("hc_solution.json"));
    let stations = sol["stations"].as_array().unwrap();
    assert_eq!(stations.len(), 12);
    assert!(stations.iter().all(|s| s["pbar_real_time"].as_f64().unwrap() >= 0.0));
    assert_eq!(sol["verification"]["all_passed"], true);

    let cmp = read_json(o.join("compare_report.json"));
    let rt = cmp["real_time_objective"].as_f64().unwrap();
    let lt = cmp["long_term_evaluated"].as_f64().unwrap();
    assert!(rt >= lt, "{rt} < {lt}");

    let risk = read_json(o.join("risk_report.json"));
    assert_eq!(risk["varsigma"], 0.001);
    assert_eq!(risk["buses"].as_array().unwrap().len(), 32);
    assert_eq!(csv_rows(o.join("hc_stations.csv")).len(), 12);

    // Timings live apart from the primary reports.
    let timings = read_json(o.join("timings.json"));
    assert!(timings["total_s"].is_f64());
    assert!(!fs::read_to_string(o.join("ppf_report.json")).unwrap().contains("analytical_s"));
}

#[test]
fn forecast_driven_pipeline_runs_end_to_end() {
    let dir = small_workspace();
    let p = dir.path();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "config.json", "--out", "o"];
        full.extend_from_slice(args);
        evhc(p, &full)
    };
    assert_eq!(run(&["gen-data"]), 0);
    assert_eq!(run(&["train", "--epochs", "1", "--ablation", "noWA,noTA,fc"]), 0);
    let o = p.join("o");

    let metrics = csv_rows(o.join("metrics.csv"));
    let models: Vec<&str> = metrics.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(models, ["HA", "ASTGCN"]);
    assert_eq!(csv_rows(o.join("loss_curve.csv")).len(), 1);
    let ablation = csv_rows(o.join("ablation.csv"));
    assert_eq!(ablation.len(), 4);
    let names: Vec<&str> = ablation.iter().map(|r| r[0].as_str()).collect();
    assert!(["noWA", "noTA", "fc"].iter().all(|n| names.contains(n)), "{names:?}");

    assert_eq!(run(&["eval"]), 0);
    assert_eq!(run(&["fit-errors"]), 0);
    assert_eq!(run(&["forecast", "--sample", "3"]), 0);
    let fc = read_json(o.join("forecast.json"));
    assert_eq!(fc["stations"].as_array().unwrap().len(), 12);
    assert_eq!(run(&["forecast", "--sample", "999999"]), 2);

    assert_eq!(run(&["risk", "--source", "forecast", "--sample", "3"]), 0);
    assert_eq!(run(&["assess", "--source", "forecast", "--sample", "3", "--compare"]), 0);
    let cmp = read_json(o.join("compare_report.json"));
    assert!(cmp["real_time_objective"].as_f64().unwrap() >= cmp["long_term_evaluated"].as_f64().unwrap());
}
