//! End-to-end tests of the binary: output contracts, exit codes, and
//! manifest determinism.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robustcredit"))
}

fn benchmark_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.json")
}

fn tmp_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("robustcredit-cli-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn solve_emits_one_row_per_state_and_node() {
    let out = tmp_dir("solve");
    let status = bin()
        .args(["solve", "--config"])
        .arg(benchmark_config())
        .args(["--grid-steps", "200", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("solution.csv")).unwrap();
    assert_eq!(
        csv.lines().count(),
        1 + 4 * 201,
        "4 states x (N+1) rows plus header"
    );
    assert!(csv.starts_with("t,state_bitstring,B_value,theta_lower,theta_upper,method,"));
    assert!(out.join("manifest.txt").exists());
}

#[test]
fn check_passes_on_the_benchmark() {
    let out = tmp_dir("check");
    let output = bin()
        .args(["check", "--config"])
        .arg(benchmark_config())
        .args(["--grid-steps", "400", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stdout)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("CHECK a1_full_rank: PASS"));
    assert!(stdout.contains("CHECK bounds_sandwich: PASS"));
    assert!(stdout.contains("CHECK foc_residual: PASS"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn check_fails_on_a_grid_too_coarse_for_the_residual() {
    // 4 steps cannot satisfy the finite-difference residual gate
    let out = tmp_dir("check-coarse");
    let status = bin()
        .args(["check", "--config"])
        .arg(benchmark_config())
        .args(["--grid-steps", "4", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn invalid_config_exits_one() {
    let out = tmp_dir("invalid");
    let bad = out.join("bad.json");
    let doc = std::fs::read_to_string(benchmark_config())
        .unwrap()
        .replace("\"gamma\": 0.5", "\"gamma\": 1.2");
    std::fs::write(&bad, doc).unwrap();
    let status = bin()
        .args(["solve", "--config"])
        .arg(&bad)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    let status = bin()
        .args(["solve", "--config", "/nonexistent/x.json", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn outputs_are_deterministic() {
    let run = |name: &str| -> (String, String) {
        let out = tmp_dir(name);
        let status = bin()
            .args(["solve", "--config"])
            .arg(benchmark_config())
            .args(["--grid-steps", "150", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        (
            std::fs::read_to_string(out.join("solution.csv")).unwrap(),
            std::fs::read_to_string(out.join("manifest.txt")).unwrap(),
        )
    };
    let (csv_a, man_a) = run("det-a");
    let (csv_b, man_b) = run("det-b");
    assert_eq!(csv_a, csv_b);
    // manifests point at the same config path and flags, so identical bytes
    assert_eq!(man_a, man_b);
    assert!(man_a.contains("config_sha256="));
    assert!(man_a.contains("grid_steps=150"));
}

#[test]
fn sweep_row_count_and_price_subcommand() {
    let out = tmp_dir("sweep");
    let status = bin()
        .args(["sweep", "--config"])
        .arg(benchmark_config())
        .args([
            "--grid-steps",
            "150",
            "--param",
            "penalty_mu.00.1",
            "--values",
            "0.1:2:10",
            "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 10);
    assert!(csv.starts_with("penalty_mu.00.1,B_00,"));

    let status = bin()
        .args(["price", "--config"])
        .arg(benchmark_config())
        .args(["--grid-steps", "150", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.join("prices.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 151);
}

#[test]
fn simulate_writes_summary() {
    let out = tmp_dir("simulate");
    let output = bin()
        .args(["simulate", "--config"])
        .arg(benchmark_config())
        .args([
            "--grid-steps",
            "200",
            "--paths",
            "2000",
            "--seed",
            "7",
            "--measure",
            "worst",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = std::fs::read_to_string(out.join("mc_summary.csv")).unwrap();
    assert!(csv.starts_with("estimator,mean,std_error,target,z_score"));
    assert!(csv.lines().any(|l| l.starts_with("objective,")));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("objective"));
}

#[test]
fn thread_cap_env_is_honored() {
    let out = tmp_dir("threads");
    let status = bin()
        .env("ROBUSTCREDIT_THREADS", "1")
        .args(["solve", "--config"])
        .arg(benchmark_config())
        .args(["--grid-steps", "100", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let status = bin()
        .env("ROBUSTCREDIT_THREADS", "zero")
        .args(["solve", "--config"])
        .arg(benchmark_config())
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
