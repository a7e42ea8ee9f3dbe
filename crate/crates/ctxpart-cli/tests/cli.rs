//! End-to-end tests that drive the compiled `ctxpart` binary: run-directory
//! layout, exit codes, determinism, and derived artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL_CONFIG: &str = r#"{
  "dim": 16,
  "hidden": 16,
  "segments": 2,
  "steps": 30,
  "recalib_period": 10,
  "batch_size": 4,
  "examples_per_task": 8,
  "seed": 7
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctxpart"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf8 stderr")
}

fn write_config(dir: &Path, contents: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, contents).expect("write config");
    path
}

/// One small trained run shared by the read-only subcommand tests.
fn shared_run() -> &'static Path {
    static RUN: OnceLock<PathBuf> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir").keep();
        let config = write_config(&dir, SMALL_CONFIG);
        let out_dir = dir.join("run");
        let out = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
        out_dir
    })
}

#[test]
fn train_writes_the_full_run_directory() {
    let run_dir = shared_run();
    for name in ["config.json", "metrics.jsonl", "params.bin"] {
        assert!(run_dir.join(name).is_file(), "missing {name}");
    }
    for name in [
        "segmaps/step_10.json",
        "segmaps/step_20.json",
        "segmaps/step_30.json",
        "segmaps/final.json",
    ] {
        assert!(run_dir.join(name).is_file(), "missing {name}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 30, "one row per step");
    for line in metrics.lines() {
        let row: serde_json::Value = serde_json::from_str(line).expect("valid JSON row");
        assert!(row.get("step").is_some());
        assert!(row.get("total").is_some());
        assert!(row.get("grad_norm").is_some());
    }
}

#[test]
fn train_prints_final_validation_metrics() {
    // Re-train into a scratch dir so this test owns its stdout.
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0);
    let text = stdout(&out);
    for key in [
        "accuracy=",
        "perplexity=",
        "coherence=",
        "active_param_fraction=",
        "specialization_index=",
    ] {
        assert!(text.contains(key), "stdout missing {key}: {text}");
    }
}

#[test]
fn train_missing_config_exits_2_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run(&[
        "train",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("nope.json"));
}

#[test]
fn train_refuses_a_nonempty_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let out_dir = dir.path().join("run");
    std::fs::create_dir(&out_dir).unwrap();
    std::fs::write(out_dir.join("junk.txt"), "x").unwrap();
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("not empty"));
}

#[test]
fn train_rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), r#"{"dim": 16, "wibble": 3}"#);
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("wibble"));
}

#[test]
fn seed_flag_overrides_and_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let recorded: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("config.json")).unwrap())
            .unwrap();
    assert_eq!(recorded["seed"], 99);
}

#[test]
fn identical_configs_produce_byte_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL_CONFIG);
    let mut artifacts: Vec<(Vec<u8>, Vec<u8>)> = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
        artifacts.push((
            std::fs::read(out_dir.join("metrics.jsonl")).unwrap(),
            std::fs::read(out_dir.join("params.bin")).unwrap(),
        ));
    }
    assert_eq!(artifacts[0].0, artifacts[1].0, "metrics.jsonl differs");
    assert_eq!(artifacts[0].1, artifacts[1].1, "params.bin differs");
}

#[test]
fn runaway_learning_rate_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(
        dir.path(),
        r#"{
          "dim": 16, "hidden": 16, "segments": 2, "steps": 50,
          "recalib_period": 25, "batch_size": 4, "examples_per_task": 8,
          "optimizer": "sgd", "learning_rate": 1e15, "seed": 7
        }"#,
    );
    let out = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 3);
    assert!(stderr(&out).contains("diverged"));
}

#[test]
fn eval_prints_csv_and_is_idempotent() {
    let run_dir = shared_run();
    let out = run(&["eval", "--run", run_dir.to_str().unwrap(), "--split", "val"]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7, "header + 5 tasks + aggregate: {text}");
    assert_eq!(
        lines[0],
        "task,accuracy_pct,perplexity,coherence,specialization_index,active_param_fraction,example_count"
    );
    for task in ["copy", "reverse", "sort_chars", "majority_symbol", "case_flip"] {
        assert!(
            lines.iter().any(|l| l.starts_with(&format!("{task},"))),
            "missing row for {task}"
        );
    }
    assert!(lines[6].starts_with("aggregate,"));

    let csv_path = run_dir.join("eval/val.csv");
    let json_path = run_dir.join("eval/val.json");
    assert!(csv_path.is_file() && json_path.is_file());
    let first_csv = std::fs::read(&csv_path).unwrap();
    assert_eq!(first_csv, text.as_bytes(), "file matches stdout");

    // Second invocation regenerates the identical bytes and still succeeds.
    let again = run(&["eval", "--run", run_dir.to_str().unwrap(), "--split", "val"]);
    assert_eq!(exit_code(&again), 0, "stderr: {}", stderr(&again));
    assert_eq!(std::fs::read(&csv_path).unwrap(), first_csv);
    assert_eq!(stdout(&again), text);
}

#[test]
fn eval_rejects_the_train_split() {
    let run_dir = shared_run();
    let out = run(&[
        "eval",
        "--run",
        run_dir.to_str().unwrap(),
        "--split",
        "train",
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("possible values"));
}

#[test]
fn eval_missing_run_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "eval",
        "--run",
        dir.path().join("absent").to_str().unwrap(),
        "--split",
        "val",
    ]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn plot_writes_xml_valid_step_plots() {
    let run_dir = shared_run();
    let out = run(&[
        "plot",
        "--run",
        run_dir.to_str().unwrap(),
        "--metrics",
        "total,accuracy",
    ]);
    assert_eq!(exit_code(&out), 0, "stderr: {}", stderr(&out));
    for name in ["total", "accuracy"] {
        let path = run_dir.join(format!("plots/{name}.svg"));
        let svg = std::fs::read_to_string(&path).expect("plot file exists");
        let doc = roxmltree::Document::parse(&svg).expect("well-formed XML");
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(
            doc.descendants().any(|n| n.tag_name().name() == "polyline"),
            "{name}.svg has no polyline"
        );
    }
}

#[test]
fn plot_unknown_metric_exits_2_and_lists_names() {
    let run_dir = shared_run();
    let out = run(&[
        "plot",
        "--run",
        run_dir.to_str().unwrap(),
        "--metrics",
        "bogus",
    ]);
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("bogus"));
    for name in ["total", "task_loss", "grad_norm", "accuracy", "coherence"] {
        assert!(err.contains(name), "error should list {name}: {err}");
    }
}

#[test]
fn inspect_reports_every_segment_and_first_snapshot_churn() {
    let run_dir = shared_run();
    let latest = run(&["inspect", "--run", run_dir.to_str().unwrap()]);
    assert_eq!(exit_code(&latest), 0, "stderr: {}", stderr(&latest));
    let text = stdout(&latest);
    assert!(text.contains("step 30"));
    assert!(text.contains("segment 0: units="));
    assert!(text.contains("segment 1: units="));
    assert!(!text.contains("segment 2:"), "only 2 segments configured");
    assert!(text.contains("context_profile: copy="));
    assert!(text.contains("mean_alpha:"));

    let first = run(&[
        "inspect",
        "--run",
        run_dir.to_str().unwrap(),
        "--step",
        "10",
    ]);
    assert_eq!(exit_code(&first), 0);
    assert!(
        stdout(&first).contains("churn: 1.0000"),
        "first snapshot churn is 1.0 by convention: {}",
        stdout(&first)
    );
}

#[test]
fn inspect_unknown_step_exits_2_and_lists_steps() {
    let run_dir = shared_run();
    let out = run(&[
        "inspect",
        "--run",
        run_dir.to_str().unwrap(),
        "--step",
        "7",
    ]);
    assert_eq!(exit_code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains('7') && err.contains("10, 20, 30"), "{err}");
}
