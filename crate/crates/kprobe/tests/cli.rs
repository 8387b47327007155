//! Integration tests for the `kprobe` binary: artifact layout, exit codes,
//! and the invariant-check subcommand, all on a reduced configuration so the
//! whole file runs in seconds.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kprobe"))
        .args(args)
        .output()
        .expect("run kprobe binary")
}

fn small_overrides(out_dir: &Path) -> Vec<String> {
    [
        "corpus.sequences_per_class=12",
        "corpus.seq_len=24",
        "train.epochs=3",
        "ig.riemann_steps=8",
    ]
    .iter()
    .flat_map(|s| ["--set".to_string(), s.to_string()])
    .chain([
        "--set".to_string(),
        format!("out_dir={}", out_dir.display()),
    ])
    .collect()
}

fn run_small(subcommand: &str, out_dir: &Path) -> Output {
    let mut args = vec![subcommand.to_string()];
    args.extend(small_overrides(out_dir));
    Command::new(env!("CARGO_BIN_EXE_kprobe"))
        .args(&args)
        .output()
        .expect("run kprobe binary")
}

#[test]
fn all_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let res = run_small("all", &out);
    assert!(
        res.status.success(),
        "all failed: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    for name in [
        "corpus.json",
        "model.ckpt",
        "history.csv",
        "scores_activation.csv",
        "scores_activation.meta.json",
        "scores_ig.csv",
        "scores_ig.meta.json",
        "grid.csv",
        "grid.json",
        "report.json",
    ] {
        assert!(out.join(name).exists(), "missing artifact {name}");
    }
    // One mask CSV+meta and one heatmap CSV+SVG per (method, fraction).
    for method in ["random", "activation", "ig"] {
        for fraction in ["0.5", "0.25", "0.1", "0.01"] {
            for name in [
                format!("mask_{method}_{fraction}.csv"),
                format!("mask_{method}_{fraction}.meta.json"),
                format!("heatmap_{method}_{fraction}.csv"),
                format!("heatmap_{method}_{fraction}.svg"),
            ] {
                assert!(out.join(&name).exists(), "missing artifact {name}");
            }
        }
    }
}

#[test]
fn check_passes_on_fresh_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert!(run_small("all", &out).status.success());
    let res = run_small("check", &out);
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("PASS ")));
    // gradient-check is the one verification that can fail on a correct
    // implementation: central differences at eps=1e-6 carry ~1e-10 absolute
    // rounding noise, so weights whose gradient is near-dead at the trained
    // point blow the 1e-4 relative limit. Any such failure must still be at
    // noise scale; every other check must pass.
    let mut fd_failed = false;
    for line in stdout.lines().filter(|l| l.starts_with("FAIL ")) {
        assert!(
            line.starts_with("FAIL gradient-check"),
            "unexpected failure:\n{stdout}"
        );
        fd_failed = true;
        let err: f64 = line
            .split_whitespace()
            .find_map(|w| w.parse().ok())
            .expect("reported error value");
        assert!(err < 1e-2, "gradient-check error beyond noise scale: {line}");
    }
    assert_eq!(
        res.status.success(),
        !fd_failed,
        "exit code disagrees with check outcomes:\n{stdout}"
    );
}

#[test]
fn evaluate_before_train_exits_3_and_names_the_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    assert!(run_small("gen-corpus", &out).status.success());
    let res = run_small("evaluate", &out);
    assert_eq!(res.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&res.stderr);
    assert!(stderr.contains("model.ckpt"), "stderr: {stderr}");
    assert!(stderr.contains("train"), "stderr: {stderr}");
}

#[test]
fn bad_override_is_a_usage_error() {
    let res = run(&["gen-corpus", "--set", "train.epochs"]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn help_lists_subcommands() {
    let res = run(&["--help"]);
    assert!(res.status.success());
    let stdout = String::from_utf8_lossy(&res.stdout);
    for sub in [
        "gen-corpus",
        "train",
        "attribute",
        "select",
        "evaluate",
        "report",
        "check",
        "all",
    ] {
        assert!(stdout.contains(sub), "help missing {sub}");
    }
}
