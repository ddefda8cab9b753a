//! Smoke tests of the `pbrl` binary.

use std::path::Path;
use std::process::Command;

fn pbrl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pbrl"))
}

const SHORT: [&str; 8] = [
    "--set",
    "trainer.total_steps=3000",
    "--set",
    "trainer.warmup_steps=1000",
    "--set",
    "trainer.eval_episodes=2",
    "--set",
    "trainer.ensemble_size=1",
];

fn metrics_rows(dir: &Path) -> usize {
    std::fs::read_to_string(dir.join("metrics.csv")).unwrap().lines().count() - 1
}

#[test]
fn run_writes_outputs_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let status = pbrl()
        .args(["run", "--losses", "ce,ad", "--budget", "20", "--seed", "3", "--out-dir"])
        .arg(&out)
        .args(SHORT)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(metrics_rows(&out), 4);
    let resolved = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    assert!(resolved.contains("max_feedback = 20"));
    assert!(resolved.contains("losses = \"ce,ad\""));
    assert!(resolved.contains("triplet = 0.0"));

    let eval = pbrl()
        .args(["eval", "--episodes", "3", "--checkpoint"])
        .arg(out.join("checkpoint"))
        .output()
        .unwrap();
    assert!(eval.status.success());
    let stats: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    assert!(stats.is_object());
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "seed = 9\nlosses = \"ce\"\n[trainer]\nk_window = 5\n").unwrap();
    let out = dir.path().join("run");
    let status = pbrl()
        .args(["run", "--env", "gridworld-shaped", "--config"])
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .args(SHORT)
        .status()
        .unwrap();
    assert!(status.success());
    let resolved = std::fs::read_to_string(out.join("config.resolved")).unwrap();
    for needle in ["seed = 9", "k_window = 5", "reward_mode = \"shaped\"", "run_id = \"ce-seed9\""] {
        assert!(resolved.contains(needle), "{needle} missing from\n{resolved}");
    }
}

#[test]
fn bad_arguments_fail_cleanly() {
    for args in [
        vec!["run", "--losses", "triplet"],
        vec!["run", "--env", "maze"],
        vec!["run", "--set", "trainer.no_such_key=1"],
        vec!["ablate", "--seeds", "0,1"],
    ] {
        let output = pbrl().args(&args).output().unwrap();
        assert_eq!(output.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&output.stderr);
        assert!(err.starts_with("error:"), "{args:?}: {err}");
    }
}
