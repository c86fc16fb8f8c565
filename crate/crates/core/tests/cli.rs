//! Exit codes and outputs of the `marh` binary.

use std::path::Path;
use std::process::{Command, Output};

use mar_harness::ft_dataset::{read_records, STEP1_FILE};

const FIXTURES: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures");

fn marh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_marh"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    format!("{FIXTURES}/{name}")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn validate_exit_codes() {
    let ok = marh(&["validate", "--config", &config("mini.toml")]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("5 entities, 3 relations, 5 triplets, 12 questions"));

    let bad = marh(&["validate", "--config", &config("mini_dangling.toml")]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("moon"));

    let missing = marh(&["validate", "--config", &config("nope.toml")]);
    assert_eq!(code(&missing), 1);
}

#[test]
fn runtime_failure_is_two() {
    let dir = tempfile::tempdir().unwrap();
    // A run directory with no results cannot be reported on.
    let o = marh(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn ftdata_stage_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = marh(&["ftdata", "--config", &config("mini.toml"), "--stage", "1", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_records(&dir.path().join(STEP1_FILE)).unwrap().len(), 15);
}

#[test]
fn run_then_diff_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, parallel) in [(&a, "1"), (&b, "4")] {
        let o = marh(&[
            "run",
            "--config",
            &config("mini.toml"),
            "--out",
            out.to_str().unwrap(),
            "--parallel",
            parallel,
            "--seed",
            "3",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let delta = dir.path().join("delta");
    let o = marh(&[
        "report",
        "--diff",
        a.to_str().unwrap(),
        b.to_str().unwrap(),
        "--out",
        delta.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(delta.join("delta.csv")).unwrap();
    let mut rows = csv.lines().skip(1).peekable();
    assert!(rows.peek().is_some());
    for row in rows {
        let last = row.rsplit(',').next().unwrap();
        assert_eq!(last.parse::<f64>().unwrap(), 0.0, "{row}");
    }
}

#[test]
fn prompts_and_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = marh(&["prompts", "--config", &config("mini.toml"), "--out", out, "--subtask", "vvt,ttv"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("unified.txt").is_file());

    let a = format!("{FIXTURES}/mini_kg/images/ice.png");
    let b = format!("{FIXTURES}/mini_kg/images/water.png");
    let combined = dir.path().join("pair.png");
    let o = marh(&["images", &a, &b, "--out", combined.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(&combined).is_file());

    let o = marh(&["images", &a]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_subtask_is_validation_failure() {
    let o = marh(&["run", "--config", &config("mini.toml"), "--subtask", "xyz"]);
    assert_eq!(code(&o), 1);
}
