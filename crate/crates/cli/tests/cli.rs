use std::path::Path;
use std::process::{Command, Output};

use rationale_core::corpus::{write_normalized, Example, Task};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rationale-eval"))
}

fn examples() -> Vec<Example> {
    (0..6)
        .map(|i| {
            Example::new(
                format!("ex{i}"),
                Task::Nli,
                [
                    ("premise".to_string(), format!("A man number {i} walks a dog in the park.")),
                    ("hypothesis".to_string(), "A person is outside.".to_string()),
                ],
                Task::Nli.default_labels(),
                "entailment",
                [1, 5, 10],
            )
            .unwrap()
        })
        .collect()
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let data = dir.join("data.jsonl");
    write_normalized(&data, &examples()).unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let cfg = format!(
        r#"name = "cli-test"
model_id = "mock"
out_dir = "out"
baselines = ["human"]
{extra}

[dataset]
path = "data.jsonl"
adapter = "normalized"

[endpoint]
base_url = "http://127.0.0.1:{port}/v1"
timeout_secs = 2

[endpoint.retry]
max_retries = 0
"#
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn baseline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    write_normalized(&data, &examples()).unwrap();
    let out = dir.path().join("out");
    let o = bin()
        .args(["baseline", "--dataset"])
        .arg(&data)
        .args(["--seeds", "5", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["baseline.csv", "baseline.md", "baseline.report.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("baseline.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("baseline/random/top_var"));
}

#[test]
fn missing_template_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let templates = dir.path().join("templates");
    std::fs::create_dir_all(&templates).unwrap();
    std::fs::write(templates.join("manifest.toml"), "template = []\n").unwrap();
    let cfg = write_config(dir.path(), "templates_dir = \"templates\"");
    let o = bin().arg("faithfulness").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("error"), "{}", stderr(&o));
}

#[test]
fn unreachable_endpoint_degrades_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = bin().arg("faithfulness").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let out = dir.path().join("out");
    assert!(out.join("faithfulness.failures.jsonl").exists());
    assert!(out.join("faithfulness.csv").exists());
}

#[test]
fn offline_flag_never_touches_the_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cache_dir = \"cache\"");
    let o = bin()
        .arg("faithfulness")
        .arg("--config")
        .arg(&cfg)
        .arg("--offline")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let failures = std::fs::read_to_string(dir.path().join("out/faithfulness.failures.jsonl")).unwrap();
    assert!(failures.contains("offline"), "{failures}");
}

#[test]
fn report_reemits_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    write_normalized(&data, &examples()).unwrap();
    let first = dir.path().join("first");
    let o = bin()
        .args(["baseline", "--seeds", "3", "--dataset"])
        .arg(&data)
        .arg("--out")
        .arg(&first)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let again = dir.path().join("again");
    let o = bin()
        .arg("report")
        .arg("--input")
        .arg(first.join("baseline.report.json"))
        .arg("--out")
        .arg(&again)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["baseline.csv", "baseline.md"] {
        assert_eq!(
            std::fs::read(first.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_arguments_are_rejected() {
    let o = bin().args(["baseline"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin().args(["align"]).output().unwrap();
    assert!(!o.status.success());
}
