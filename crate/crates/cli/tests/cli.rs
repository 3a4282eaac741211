use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use icd_core::harness::ExperimentConfig;

fn icd(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_icd"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("icd-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn synth(dir: &Path) {
    let o = icd(
        &[
            "synth",
            "--out",
            "data",
            "--stream",
            "60",
            "--support",
            "40",
            "--validation",
            "30",
            "--seed",
            "4",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> &'static str {
    std::fs::write(dir.join("cfg.json"), serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    "cfg.json"
}

#[test]
fn run_writes_a_readable_report() {
    let dir = scratch("run");
    synth(&dir);
    let o = icd(
        &["run", "--dataset", "data/stream.jsonl", "--out", "runs", "--seed", "7"],
        &dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = icd_core::RunReport::read(&dir.join("runs/icd_online-seed7.jsonl")).unwrap();
    assert_eq!(report.outcomes.len(), 60);
    assert_eq!(report.header.seed, 7);
    assert!(String::from_utf8_lossy(&o.stdout).contains("T(x)="));
}

#[test]
fn exhausted_budget_exits_with_three_and_still_writes() {
    let dir = scratch("budget");
    synth(&dir);
    let mut cfg = ExperimentConfig::simulated(0.4, 0.95);
    cfg.run.budget = Some(1);
    let c = write_config(&dir, &cfg);
    let o = icd(
        &["run", "--config", c, "--dataset", "data/stream.jsonl", "--out", "runs"],
        &dir,
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(dir.join("runs/icd_online-seed0.jsonl").exists());
}

#[test]
fn config_problems_exit_with_one() {
    let dir = scratch("usage");
    synth(&dir);
    let mut v = serde_json::to_value(ExperimentConfig::simulated(0.4, 0.95)).unwrap();
    v["teacher"]["api_key"] = serde_json::json!("sk-inline");
    std::fs::write(dir.join("bad.json"), v.to_string()).unwrap();
    let o = icd(
        &[
            "run",
            "--config",
            "bad.json",
            "--dataset",
            "data/stream.jsonl",
            "--out",
            "r",
        ],
        &dir,
    );
    assert_eq!(o.status.code(), Some(1));

    let o = icd(&["run", "--dataset", "missing.jsonl", "--out", "r"], &dir);
    assert_eq!(o.status.code(), Some(1));
    let o = icd(
        &[
            "run",
            "--dataset",
            "data/stream.jsonl",
            "--baseline",
            "icd_offline",
            "--out",
            "r",
        ],
        &dir,
    );
    assert_eq!(o.status.code(), Some(1));
    let o = icd(&["no-such-command"], &dir);
    assert_eq!(o.status.code(), Some(1));
    let o = icd(&["--help"], &dir);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn missing_api_key_variable_is_a_config_error() {
    let dir = scratch("env");
    synth(&dir);
    let mut v = serde_json::to_value(ExperimentConfig::simulated(0.4, 0.95)).unwrap();
    v["teacher"] = serde_json::json!({
        "kind": "wire",
        "base_url": "http://127.0.0.1:9",
        "model_id": "teacher",
        "api_key_env": "ICD_TEST_KEY_THAT_IS_NOT_SET",
    });
    std::fs::write(dir.join("wire.json"), v.to_string()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_icd"))
        .args([
            "run",
            "--config",
            "wire.json",
            "--dataset",
            "data/stream.jsonl",
            "--out",
            "r",
        ])
        .current_dir(&dir)
        .env_remove("ICD_TEST_KEY_THAT_IS_NOT_SET")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ICD_TEST_KEY_THAT_IS_NOT_SET"));
}

#[test]
fn sweep_writes_summaries_and_cells() {
    let dir = scratch("sweep");
    synth(&dir);
    std::fs::write(
        dir.join("spec.json"),
        r#"{"axis": "shots", "values": [0, 2], "repeats": 2, "baseline": "oracle_demos"}"#,
    )
    .unwrap();
    let o = icd(
        &[
            "sweep",
            "--spec",
            "spec.json",
            "--dataset",
            "data/stream.jsonl",
            "--support",
            "data/support.jsonl",
            "--out",
            "sw",
        ],
        &dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = std::fs::read_to_string(dir.join("sw/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(dir.join("sw/cells/2-r1.jsonl").exists());
    assert!(dir.join("sw/series.csv").exists());
}

#[test]
fn pool_snapshot_round_trip_through_the_cli() {
    let dir = scratch("pool");
    synth(&dir);
    let o = icd(
        &[
            "pool",
            "build",
            "--dataset",
            "data/support.jsonl",
            "--out",
            "p.snap",
            "--gold",
        ],
        &dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = icd(&["pool", "inspect", "--pool", "p.snap"], &dir);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["entries"], 40);
    assert_eq!(v["sources"]["oracle"], 40);

    // A run can start from the snapshot.
    let mut cfg = ExperimentConfig::simulated(0.4, 0.95);
    cfg.run.pool_init = icd_core::pipeline::PoolInit::Snapshot {
        path: dir.join("p.snap"),
    };
    let c = write_config(&dir, &cfg);
    let o = icd(
        &["run", "--config", c, "--dataset", "data/stream.jsonl", "--out", "runs"],
        &dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = icd_core::RunReport::read(&dir.join("runs/icd_online-seed0.jsonl")).unwrap();
    assert!(report.header.metrics.pool_size >= 40);
}

#[test]
fn calibrate_and_compare_selectors_print_results() {
    let dir = scratch("cal");
    synth(&dir);
    let o = icd(&["calibrate", "--validation", "data/validation.jsonl"], &dir);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["delta"].as_f64().unwrap() > 0.0);
    let o = icd(
        &["calibrate", "--validation", "data/validation.jsonl", "--quantile", "2"],
        &dir,
    );
    assert_eq!(o.status.code(), Some(1));

    let o = icd(
        &[
            "compare-selectors",
            "--dataset",
            "data/stream.jsonl",
            "--support",
            "data/support.jsonl",
            "--selectors",
            "random,sq_text_text",
        ],
        &dir,
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 3);
    assert!(out.lines().nth(1).unwrap().starts_with("random,"));
}
