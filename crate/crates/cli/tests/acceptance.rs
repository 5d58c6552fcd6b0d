//! Criterion 10 plus command-level checks: identical configuration and seed
//! must produce byte-identical JSON summaries across worker-thread counts,
//! and the exit-code contract must hold.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};

static RUN_COUNTER: AtomicUsize = AtomicUsize::new(0);

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_stackgame")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(format!("{name}.json"))
}

fn run(threads: &str, args: &[&str]) -> (std::process::Output, PathBuf) {
    let token = RUN_COUNTER.fetch_add(1, Ordering::Relaxed);
    let out_dir = std::env::temp_dir().join(format!(
        "stackgame-acceptance-{}-{token}-{threads}",
        std::process::id()
    ));
    let _ = std::fs::remove_dir_all(&out_dir);
    let output = Command::new(binary())
        .env("STACKGAME_THREADS", threads)
        .args(args)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .expect("binary runs");
    (output, out_dir)
}

#[test]
fn criterion_10_reproducibility_across_thread_counts() {
    let config = fixture("scalar_fullspace");
    let config_arg = config.to_str().unwrap();

    let mut summaries: Vec<Vec<u8>> = Vec::new();
    let mut estimates: Vec<Vec<u8>> = Vec::new();
    for threads in ["1", "2", "8"] {
        let (output, out_dir) = run(
            threads,
            &["solve-aol", "--config", config_arg, "--format", "csv"],
        );
        assert!(
            output.status.success(),
            "solve-aol failed with {threads} threads: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        summaries.push(std::fs::read(out_dir.join("summary.json")).unwrap());

        let (output, out_dir) = run(
            threads,
            &[
                "simulate",
                "--config",
                config_arg,
                "--source",
                "riccati",
                "--paths",
                "4000",
                "--steps",
                "60",
            ],
        );
        assert!(
            output.status.success(),
            "simulate failed with {threads} threads: {}",
            String::from_utf8_lossy(&output.stderr)
        );
        estimates.push(std::fs::read(out_dir.join("estimate.json")).unwrap());
    }
    assert_eq!(summaries[0], summaries[1], "summaries differ between 1 and 2 threads");
    assert_eq!(summaries[0], summaries[2], "summaries differ between 1 and 8 threads");
    assert_eq!(estimates[0], estimates[1], "estimates differ between 1 and 2 threads");
    assert_eq!(estimates[0], estimates[2], "estimates differ between 1 and 8 threads");
    println!(
        "criterion 10 (reproducibility): PASS, byte-identical summaries and estimates across 1/2/8 worker threads"
    );
}

#[test]
fn exit_codes_follow_the_contract() {
    // validation failure: negative control weight
    let bad = std::env::temp_dir().join(format!("stackgame-bad-{}.json", std::process::id()));
    let text = std::fs::read_to_string(fixture("scalar_fullspace")).unwrap();
    std::fs::write(&bad, text.replace("\"R2\": [[1.0]]", "\"R2\": [[-1.0]]")).unwrap();
    let (output, _) = run("1", &["validate", "--config", bad.to_str().unwrap()]);
    assert_eq!(output.status.code(), Some(2), "validation failure exits 2");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("\"error\""), "structured error on stderr: {stderr}");

    // missing file: I/O error
    let (output, _) = run("1", &["validate", "--config", "/nonexistent/nope.json"]);
    assert_eq!(output.status.code(), Some(4), "I/O failure exits 4");

    // healthy fixture: success
    let (output, _) = run(
        "1",
        &["validate", "--config", fixture("scalar_fullspace").to_str().unwrap()],
    );
    assert_eq!(output.status.code(), Some(0));
}

#[test]
fn verify_command_reports_all_sections() {
    let (output, out_dir) = run(
        "2",
        &[
            "verify",
            "--config",
            fixture("scalar_fullspace").to_str().unwrap(),
        ],
    );
    assert!(
        output.status.success(),
        "verify failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("verify.json")).unwrap()).unwrap();
    assert!(report["max_principle"]["max_follower_projection_residual"].as_f64().unwrap() < 1e-8);
    assert_eq!(report["follower_probe"]["passed"], true);
    assert_eq!(report["leader_probe"]["passed"], true);
    assert!(report["h3"]["max_stationarity_residual"].as_f64().unwrap() < 1e-8);
}

#[test]
fn oracle_compare_emits_deltas() {
    let (output, out_dir) = run(
        "2",
        &[
            "oracle-compare",
            "--config",
            fixture("constrained_n3").to_str().unwrap(),
        ],
    );
    assert!(
        output.status.success(),
        "oracle-compare failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("oracle_compare.json")).unwrap())
            .unwrap();
    assert!(report["max_control_delta"]["u"].as_f64().unwrap() <= 1e-4);
    assert!(report["max_control_delta"]["v"].as_f64().unwrap() <= 1e-4);
    assert!(report["costs"]["j1_delta"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn solve_aclm_emits_solution_table() {
    let (output, out_dir) = run(
        "2",
        &["solve-aclm", "--config", fixture("aclm").to_str().unwrap()],
    );
    assert!(
        output.status.success(),
        "solve-aclm failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = std::fs::read_to_string(out_dir.join("aclm.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "layer,node,t,alpha,beta,gamma,delta1,delta2,u2,u1,x_star"
    );
    // 2^0 + ... + 2^8 rows
    assert_eq!(csv.lines().count() - 1, (0..=8).map(|i| 1usize << i).sum::<usize>());
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["reconstruction_residual"].as_f64().unwrap() <= 1e-8);
}
