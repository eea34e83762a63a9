//! End-to-end CLI checks: corpus generation, layout serialization, a
//! record/replay evaluation cycle, and report re-emission.

use std::path::Path;
use std::process::Command;

fn doceval(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_doceval"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(output: &std::process::Output, context: &str) {
    assert!(
        output.status.success(),
        "{context} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn corpus_eval_and_reports_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let generated = doceval(
        dir,
        &[
            "corpus", "gen", "--out", "corpus", "--seed", "3", "--docs", "4",
            "--inject", "missing=1.0",
        ],
    );
    assert_success(&generated, "corpus gen");
    assert!(dir.join("corpus/manifest.json").exists());
    assert!(dir.join("corpus/injections.jsonl").exists());

    let serialized = doceval(
        dir,
        &["layout", "serialize", "--fixture", "corpus/fixtures/doc-0000.json"],
    );
    assert_success(&serialized, "layout serialize");
    assert!(!serialized.stdout.is_empty());

    std::fs::write(
        dir.join("run.toml"),
        r#"
corpus_dir = "corpus"
out_dir = "runs/demo"

[[models]]
provider = "stub"
id = "stub-small"

[cassette]
mode = "record"
path = "cassette.jsonl"
"#,
    )
    .unwrap();

    let recorded = doceval(dir, &["eval", "run", "--config", "run.toml"]);
    assert_success(&recorded, "eval run (record)");

    let replayed = doceval(
        dir,
        &["eval", "run", "--config", "run.toml", "--mode", "replay"],
    );
    assert_success(&replayed, "eval run (replay)");
    let replay_stdout = String::from_utf8_lossy(&replayed.stdout);
    assert!(replay_stdout.contains("scored 4/4"), "{replay_stdout}");

    for report in ["score", "errors", "cost"] {
        let output = doceval(dir, &["report", report, "--run", "runs/demo"]);
        assert_success(&output, report);
        assert!(!output.stdout.is_empty(), "{report} report must print");
    }

    let offline = doceval(
        dir,
        &["eval", "offline", "--corpus", "corpus", "--out", "runs/offline"],
    );
    assert_success(&offline, "eval offline");
    assert!(dir.join("runs/offline/triage/error_report.txt").exists());
}

#[test]
fn rejects_bad_injection_spec() {
    let tmp = tempfile::tempdir().unwrap();
    let output = doceval(
        tmp.path(),
        &["corpus", "gen", "--out", "c", "--inject", "bogus=0.5"],
    );
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown error kind"));
}
