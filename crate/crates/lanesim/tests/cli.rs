//! End-to-end checks of the binary: flags, exit codes, and artifact files.

use std::fs;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lanesim"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn lanesim");
    assert!(
        out.status.success(),
        "lanesim {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const GIB: u64 = 1 << 30;

#[test]
fn run_writes_log_and_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("artifacts");
    run_ok(&[
        "run",
        "--synth",
        "count=20,seed=3",
        "--policy",
        "pack",
        "--capacity",
        "16GiB",
        "--out",
        out.to_str().unwrap(),
    ]);
    for name in ["run.log", "summary.csv", "jct_cdf.csv", "memory_timeline.csv", "throughput.csv"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "policy,makespan_s,avg_queuing_s,avg_jct_s,p95_jct_s");
    assert!(lines[1].starts_with("pack,"), "row: {}", lines[1]);
    let log = fs::read_to_string(out.join("run.log")).unwrap();
    assert!(log.lines().next().unwrap().contains("\"meta\""));
}

#[test]
fn identical_flags_give_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run_ok(&[
            "run",
            "--synth",
            "count=30,seed=7",
            "--policy",
            "fifo",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    for name in ["run.log", "summary.csv", "jct_cdf.csv", "memory_timeline.csv", "throughput.csv"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        run_ok(&["synth", "--params", "count=12,seed=9,u_min=0.4,u_max=0.9", "--out", out.to_str().unwrap()]);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    // the generated file round-trips through `run --trace`
    let out = dir.path().join("run");
    run_ok(&[
        "run",
        "--trace",
        a.to_str().unwrap(),
        "--policy",
        "srtf",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(out.join("summary.csv").exists());
}

#[test]
fn bogus_policy_is_a_usage_error_listing_all_policies() {
    let out = bin()
        .args(["run", "--synth", "count=1", "--policy", "bogus", "--out", "unused"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    for name in ["fifo", "srtf", "pack", "fair"] {
        assert!(stderr.contains(name), "stderr lacks {name}: {stderr}");
    }
}

#[test]
fn deadlock_demo_reports_the_wedged_pool() {
    let out = run_ok(&["deadlock-demo", "--capacity", "12GiB"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["deadlocked"], serde_json::json!(true));
    assert_eq!(v["free_bytes"].as_u64().unwrap(), 2 * GIB);
    assert_eq!(
        v["blocked_jobs"],
        serde_json::json!([[1, 3 * GIB], [2, 3 * GIB]])
    );
}

#[test]
fn deadlock_demo_with_lanes_completes() {
    let out = run_ok(&["deadlock-demo", "--capacity", "12GiB", "--lanes"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["deadlocked"], serde_json::json!(false));
    assert_eq!(v["free_bytes"].as_u64().unwrap(), 12 * GIB);
}

#[test]
fn deadlock_demo_with_headroom_completes() {
    let out = run_ok(&["deadlock-demo", "--capacity", "32GiB"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["deadlocked"], serde_json::json!(false));
}

#[test]
fn catalog_prints_the_45_known_rows() {
    let out = run_ok(&["catalog"]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = stdout.lines().filter(|l| l.contains("persistent=")).collect();
    assert_eq!(rows.len(), 45);
    assert!(stdout.contains("googlenet,25,persistent=110.9MB"), "{stdout}");
    assert!(stdout.contains("resnet152,75,persistent=822.2MB"), "{stdout}");
}

#[test]
fn report_reproduces_run_csvs_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    run_ok(&[
        "run",
        "--synth",
        "count=25,seed=5",
        "--policy",
        "fair",
        "--out",
        first.to_str().unwrap(),
    ]);
    let second = dir.path().join("second");
    run_ok(&[
        "report",
        "--log",
        first.join("run.log").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    for name in ["summary.csv", "jct_cdf.csv", "memory_timeline.csv", "throughput.csv"] {
        assert_eq!(
            fs::read(first.join(name)).unwrap(),
            fs::read(second.join(name)).unwrap(),
            "{name} differs from the original run"
        );
    }
}

#[test]
fn unschedulable_job_fails_with_its_id_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let job = serde_json::json!({
        "id": 31,
        "name": "whale_1",
        "arrival_time_s": 0.0,
        "persistent_bytes": 10 * GIB,
        "ephemeral_bytes": 10 * GIB,
        "iteration_duration_s": 1.0,
        "iteration_count": 5,
        "compute_fraction": 1.0,
        "kind": "training"
    });
    fs::write(&trace, format!("{job}\n")).unwrap();
    let out = bin()
        .args([
            "run",
            "--trace",
            trace.to_str().unwrap(),
            "--policy",
            "fifo",
            "--capacity",
            "16GiB",
            "--out",
            dir.path().join("x").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("31") && stderr.contains("unschedulable"), "{stderr}");
    assert!(!dir.path().join("x").join("summary.csv").exists(), "no partial artifacts");
}

#[test]
fn missing_trace_source_is_a_usage_error() {
    let out = bin().args(["run", "--policy", "fifo"]).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--trace") || stderr.contains("--synth"), "{stderr}");
}
