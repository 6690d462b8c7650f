use searchgrid::commands::{RUNS_FILE, SUMMARY_FILE};
use searchgrid_core::raster;
use serde_json::Value;
use std::path::PathBuf;
use std::process::{Command, Output};

fn scenario() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/creek.json")
}

fn run(args: &[&str], cache: Option<&std::path::Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_searchgrid"));
    cmd.args(args).env("RUST_LOG", "warn");
    match cache {
        Some(dir) => cmd.env("SEARCHGRID_CACHE_DIR", dir),
        None => cmd.env_remove("SEARCHGRID_CACHE_DIR"),
    };
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn fuse_exports_raster_and_uses_cache() {
    let cache = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let s = scenario();
    let path = s.to_str().unwrap();
    let first = json(&run(&["fuse", path, "--out", out.path().to_str().unwrap()], Some(cache.path())));
    let second = json(&run(&["fuse", path], Some(cache.path())));
    assert_eq!(first["cache"], "miss");
    assert_eq!(second["cache"], "hit");
    assert_eq!(first["manifest"], second["manifest"]);
    let (map, manifest) = raster::import(out.path()).unwrap();
    assert_eq!(map.mean.len(), 256);
    assert_eq!(manifest.columns.last().unwrap(), "lower creek:Inside");
    assert_eq!(serde_json::to_value(&manifest).unwrap(), first["manifest"]);
}

#[test]
fn simulate_writes_one_row_per_run() {
    let out = tempfile::tempdir().unwrap();
    let s = scenario();
    let args = ["simulate", s.to_str().unwrap(), "--agent", "baseline", "--runs", "4", "--seed", "3"];
    let stdout = run(&args, None).stdout;
    let text = String::from_utf8(stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("agent,start_row,start_col,run,seed,target,outcome"));
    assert_eq!(lines.count(), 8);

    let mut with_out = args.to_vec();
    with_out.extend(["--out", out.path().to_str().unwrap()]);
    run(&with_out, None);
    assert_eq!(std::fs::read_to_string(out.path().join(RUNS_FILE)).unwrap(), text);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(out.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(summary["runs"], 8);
    assert_eq!(summary["agent"], "baseline");
}

#[test]
fn compare_reports_both_agents() {
    let s = scenario();
    let report = json(&run(&["compare", s.to_str().unwrap(), "--runs", "2", "--seed", "1"], None));
    assert_eq!(report["pomcp"]["runs"], 4);
    assert_eq!(report["baseline"]["runs"], 4);
    let gap = report["localization_gap_pp"].as_f64().unwrap();
    let expect = 100.0 * (report["pomcp"]["localization_ratio"].as_f64().unwrap() - report["baseline"]["localization_ratio"].as_f64().unwrap());
    assert!((gap - expect).abs() < 1e-9);
    assert!((0.0..=1.0).contains(&report["localization_p"].as_f64().unwrap()));
}

#[test]
fn alignment_from_truth_and_from_file() {
    let s = scenario();
    let path = s.to_str().unwrap();
    let derived = json(&run(&["evaluate-alignment", path, "--samples", "100"], None));
    assert_eq!(derived["rated_cells"], 21);
    assert!(derived["mc_ndcg_positive"].as_f64().unwrap() > derived["random_ndcg_positive"].as_f64().unwrap());

    let dir = tempfile::tempdir().unwrap();
    let ratings = dir.path().join("ratings.json");
    std::fs::write(
        &ratings,
        r#"{"cells": [{"row": 0, "col": 0, "rating": -1}, {"row": 6, "col": 9, "rating": 2}],
            "relevances": [-2, 4, 0, 7, 1, 0, 5]}"#,
    )
    .unwrap();
    let report = json(&run(&["evaluate-alignment", path, "--ratings", ratings.to_str().unwrap(), "--samples", "100"], None));
    assert_eq!(report["rated_cells"], 2);
    assert!(report["mc_ndcg_negative"].is_number());
}

#[test]
fn bad_scenario_fails_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"id": "x", "grid": {"n_rows": 4, "n_cols": 4, "resolution": 1.0}, "inputs": {"priorities": ["bridges"]}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_searchgrid"))
        .args(["fuse", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("inputs.priorities[0]"));
}
