use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_flowrl");

fn example() -> Value {
    let text = fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/gaussian_tilt.json"),
    )
    .unwrap();
    let mut v: Value = serde_json::from_str(&text).unwrap();
    v["model"]["hidden"] = serde_json::json!([8]);
    v["train"]["epochs"] = 3.into();
    v["train"]["group_size"] = 8.into();
    v["eval"]["samples"] = 200.into();
    v["eval"]["bins"] = 50.into();
    v
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p
}

fn flowrl(root: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("FLOWRL_OUTPUT_ROOT", root)
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout)
        .unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn run_honours_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &example());
    let out = flowrl(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let dir = tmp.path().join("gaussian_tilt");
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    for f in [
        "summary.json",
        "config.json",
        "checkpoints/final/manifest.json",
    ] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    assert_eq!(stdout_json(&out)["status"], "completed");
}

#[test]
fn missing_field_exits_2_with_its_path() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = example();
    v["sampler"].as_object_mut().unwrap().remove("steps");
    let cfg = write(tmp.path(), "cfg.json", &v);
    let out = flowrl(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let report = stdout_json(&out);
    assert_eq!(report["kind"], "config");
    assert_eq!(report["path"], "sampler.steps");
    assert_eq!(report["exit_code"], 2);
}

#[test]
fn trajectory_with_ode_exits_2_citing_the_sampler() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = example();
    v["estimator"] = serde_json::json!({"formula": "trajectory"});
    let cfg = write(tmp.path(), "cfg.json", &v);
    let out = flowrl(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let report = stdout_json(&out);
    assert!(report["message"].as_str().unwrap().contains("SDE sampler"));
    assert!(!tmp.path().join("gaussian_tilt").exists());
}

#[test]
fn numerical_abort_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = example();
    v["objective"]["kind"] = "epg".into();
    v["train"]["optimizer"]["lr"] = 1e150.into();
    let cfg = write(tmp.path(), "cfg.json", &v);
    let out = flowrl(tmp.path(), &["run", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stdout_json(&out)["kind"], "numerical");
    assert!(tmp.path().join("gaussian_tilt/failed_group.json").is_file());
}

#[test]
fn repeated_runs_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &example());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        let out = flowrl(
            tmp.path(),
            &["run", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()],
        );
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn sweep_over_objectives_makes_two_run_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &example());
    let root = tmp.path().join("sweep");
    let out = flowrl(
        tmp.path(),
        &[
            "sweep",
            cfg.to_str().unwrap(),
            "--axis",
            "objective=epg,pepg",
            "--out",
            root.to_str().unwrap(),
        ],
    );
    assert_eq!(out.status.code(), Some(0));
    let s = stdout_json(&out);
    assert_eq!(s["cells"], 2);
    assert_eq!(s["invalid"], 0);
    assert!(root.join("objective=epg/metrics.csv").is_file());
    assert!(root.join("objective=pepg/metrics.csv").is_file());
    assert!(root.join("comparison.csv").is_file());
}

#[test]
fn gradcheck_passes_and_fails_on_a_corrupted_rule() {
    let tmp = tempfile::tempdir().unwrap();
    let report = tmp.path().join("gc.json");
    let out = flowrl(
        tmp.path(),
        &["gradcheck", "--out", report.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["passed"], true);
    let first = fs::read(&report).unwrap();
    flowrl(
        tmp.path(),
        &["gradcheck", "--out", report.to_str().unwrap()],
    );
    assert_eq!(first, fs::read(&report).unwrap());

    let out = flowrl(tmp.path(), &["gradcheck", "--corrupt-op", "matmul"]);
    assert_eq!(out.status.code(), Some(1));
    let r = stdout_json(&out);
    assert_eq!(r["passed"], false);
    assert_eq!(r["offending_ops"], serde_json::json!(["matmul"]));

    let out = flowrl(tmp.path(), &["gradcheck", "--corrupt-op", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_refuses_large_models() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = example();
    v["model"]["hidden"] = serde_json::json!([64, 64]);
    let cfg = write(tmp.path(), "cfg.json", &v);
    let out = flowrl(tmp.path(), &["gradcheck", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_reports_the_tilted_gaussian() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &example());
    let out = flowrl(tmp.path(), &["oracle", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let s = stdout_json(&out);
    assert_eq!(s["gaussian"][0]["oracle"]["variance"][0], 0.5);
    assert!(tmp.path().join("oracle-seed-0/grid_c0.csv").is_file());
}

#[test]
fn evaluate_reproduces_the_final_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "cfg.json", &example());
    let run = tmp.path().join("run");
    let out = flowrl(
        tmp.path(),
        &["run", cfg.to_str().unwrap(), "--out", run.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    let out = flowrl(
        tmp.path(),
        &["evaluate", cfg.to_str().unwrap(), run.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(stdout_json(&out), summary["final"]);
}
