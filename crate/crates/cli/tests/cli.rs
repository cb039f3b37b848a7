use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

fn calm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(calm(&[]).status.code(), Some(2));
    assert_eq!(calm(&["run", "--out", "x.jsonl"]).status.code(), Some(2));
    assert_eq!(calm(&["eval", "--style", "poetry", "--trace", "t", "--gold", "g", "--out", "o"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let o = calm(&["run", "--config", "/nonexistent/config.toml", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));
    assert!(!out.exists());
}

#[test]
fn run_eval_and_rerun_are_stable() {
    let dir = tempfile::tempdir().unwrap();
    let config = data("bench/config.toml");
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for (out, jobs) in [(&a, "1"), (&b, "3")] {
        let o = calm(&["run", "--config", s(&config), "--out", s(out), "--jobs", jobs]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let metrics = dir.path().join("m.json");
    let o = calm(&["eval", "--trace", s(&a), "--gold", s(&data("bench/gold.jsonl")), "--out", s(&metrics), "--table"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("em_recall") && table.contains("calm"), "{table}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    assert_eq!(report["queries"].as_array().unwrap().len(), 20);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t.jsonl");
    let o = calm(&[
        "run",
        "--config",
        s(&data("bench/config.toml")),
        "--out",
        s(&out),
        "--max-iterations",
        "1",
        "--k",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for line in std::fs::read_to_string(&out).unwrap().lines() {
        let run: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(run["rounds_used"], 1);
        assert_eq!(run["traces"][0]["shown_docs"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn case_study_replay_shows_retained_documents() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("case.jsonl");
    let o = calm(&["run", "--config", s(&data("case_study/asqa/config.toml")), "--out", s(&trace)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(&trace).unwrap(),
        std::fs::read(data("case_study/asqa/trace.jsonl")).unwrap(),
        "shipped trace is stale"
    );
    let o = calm(&["replay", "--trace", s(&trace), "--qid", "asqa-case"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("Access to: Document 1,2,3,4,5"), "{text}");
    assert!(text.contains("Verifier access to: Document 1,4,5"), "{text}");
    assert!(text.contains("Access to: Document 1,4,5,6,7"), "{text}");

    assert_eq!(calm(&["replay", "--trace", s(&trace), "--qid", "missing"]).status.code(), Some(1));
}

#[test]
fn index_and_sensitivity_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("index.json");
    let o = calm(&["index", "--corpus", s(&data("bench/corpus.jsonl")), "--out", s(&index)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(index.exists());

    let (out, table) = (dir.path().join("s.json"), dir.path().join("s.tsv"));
    let config = data("sensitivity/config.toml");
    let args = ["sensitivity", "--config", s(&config), "--out", s(&out), "--table", s(&table)];
    let o = calm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(&out).unwrap();
    assert!(calm(&args).status.success());
    assert_eq!(first, std::fs::read(&out).unwrap());
    let tsv = std::fs::read_to_string(&table).unwrap();
    assert_eq!(tsv.lines().count(), 7);

    let o = calm(&["sensitivity", "--config", s(&data("sensitivity/config.toml")), "--out", s(&out), "--targets", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}
