//! End-to-end checks of the installed binary: flags, exit codes, artifacts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vsr-forge"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write_tiny_gp_config(dir: &Path) -> String {
    let p = dir.join("run.json");
    fs::write(
        &p,
        r#"{
  "algorithm": "gp",
  "task": {"suite": "xprod"},
  "seed": 3,
  "gp": {"pop_size": 16, "generations": 3, "data_batch_size": 64}
}"#,
    )
    .unwrap();
    p.display().to_string()
}

#[test]
fn help_lists_subcommands_and_flags() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for word in ["run", "bench", "gen-data"] {
        assert!(text.contains(word), "help lacks {word}");
    }
    let out = run(&["run", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--config", "--seed", "--profile", "--workers", "--out", "--set"] {
        assert!(text.contains(flag), "run help lacks {flag}");
    }
}

#[test]
fn run_produces_identical_reports_for_identical_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_gp_config(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let st = run(&["run", "--config", &cfg, "--workers", "1", "--out", out_a.to_str().unwrap()]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let st = run(&["run", "--config", &cfg, "--workers", "1", "--out", out_b.to_str().unwrap()]);
    assert!(st.status.success());
    assert_eq!(
        fs::read(out_a.join("report.json")).unwrap(),
        fs::read(out_b.join("report.json")).unwrap()
    );

    // An explicit --seed overrides the file and changes the artifact.
    let out_c = dir.path().join("c");
    let st = run(&[
        "run", "--config", &cfg, "--seed", "4", "--workers", "1",
        "--out", out_c.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    assert_ne!(
        fs::read(out_a.join("report.json")).unwrap(),
        fs::read(out_c.join("report.json")).unwrap()
    );
}

#[test]
fn set_overrides_reach_the_engine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_gp_config(dir.path());
    let out = dir.path().join("o");
    let st = run(&[
        "run", "--config", &cfg, "--set", "gp.generations=1", "--workers", "1",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(st.status.success());
    let log = fs::read_to_string(out.join("run_log.jsonl")).unwrap();
    // Generations 0 (init) and 1 only.
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn bad_configs_exit_2_and_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");

    fs::write(&p, "{ not json").unwrap();
    let st = run(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(st.status.code(), Some(2));

    fs::write(
        &p,
        r#"{"algorithm": "gp", "task": {"suite": "xprod"}, "gp": {"pop_sizee": 4}}"#,
    )
    .unwrap();
    let st = run(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(st.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&st.stderr).contains("pop_sizee"),
        "diagnostic should name the offending key"
    );

    // clap's own usage errors also exit 2.
    let st = run(&["run"]);
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn bench_writes_reports_and_rejects_unknown_suites() {
    let dir = tempfile::tempdir().unwrap();
    let st = run(&[
        "bench", "--suite", "nope", "--algorithm", "gp",
        "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(st.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&st.stderr).contains("nope"));
}

#[test]
fn gen_data_is_reproducible_and_validates_input() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let st = run(&[
            "gen-data", "--task", "xprod", "--ctrl", "x2,x3", "--n", "40",
            "--seed", "11", "--out", out.to_str().unwrap(),
        ]);
        assert!(st.status.success());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(dir.path().join("a.sidecar.json").exists());

    let st = run(&["gen-data", "--task", "xprod", "--n", "0"]);
    assert_eq!(st.status.code(), Some(2));
    let st = run(&["gen-data", "--task", "no-such-suite"]);
    assert_eq!(st.status.code(), Some(2));
}
