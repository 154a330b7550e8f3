use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_groundeval"))
        .args(args)
        .output()
        .expect("spawn groundeval")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn read_lines(p: &Path) -> Vec<Value> {
    fs::read_to_string(p)
        .expect("read")
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).expect("read")).expect("json")
}

/// Pages and tasks for a small synthetic corpus.
fn corpus(dir: &TempDir, pages: usize) -> (PathBuf, PathBuf) {
    let p = dir.path().join("pages.jsonl");
    let t = dir.path().join("tasks.jsonl");
    ok(&[
        "gen-fixtures",
        "--seed",
        "11",
        "--pages",
        &pages.to_string(),
        "--out",
        s(&p),
    ]);
    ok(&["make-tasks", "--pages", s(&p), "--seed", "5", "--out", s(&t)]);
    (p, t)
}

fn echo_references(tasks: &Path, out: &Path) {
    let lines: Vec<String> = read_lines(tasks)
        .into_iter()
        .map(|t| {
            let raw = match &t["reference"] {
                Value::String(text) => text.clone(),
                other => other.to_string(),
            };
            serde_json::json!({ "task_id": t["task_id"], "raw_output": raw }).to_string()
        })
        .collect();
    fs::write(out, lines.join("\n") + "\n").expect("write predictions");
}

#[test]
fn text2d_matches_golden_output() {
    let out = ok(&["text2d", "--pages", s(&fixture("golden_page.jsonl")), "--id", "golden"]);
    let golden = fs::read_to_string(fixture("golden_text2d.txt")).expect("golden");
    assert_eq!(String::from_utf8(out.stdout).unwrap(), golden);
}

#[test]
fn text2d_single_line_and_unknown_id() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("one.jsonl");
    fs::write(
        &p,
        r#"{"id":"one","image":{"width":300,"height":100},"lines":[{"text":"just this","bbox":[0,10,90,30]}]}"#,
    )
    .unwrap();
    let out = ok(&["text2d", "--pages", s(&p), "--id", "one"]);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "just this\n");
    let out = run(&["text2d", "--pages", s(&p), "--id", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}

#[test]
fn injected_means_give_expected_composites() {
    for (file, want) in [("means_baseline.json", 0.396), ("means_finetuned.json", 0.819)] {
        let dir = TempDir::new().unwrap();
        let out = dir.path().join("report.json");
        ok(&["report", "--means", s(&fixture(file)), "--out", s(&out)]);
        let got = read_json(&out)["composite"].as_f64().expect("composite");
        assert!((got - want).abs() <= 0.0005, "{file}: {got}");
    }
}

#[test]
fn echoed_references_score_perfectly() {
    let dir = TempDir::new().unwrap();
    let (_, tasks) = corpus(&dir, 25);
    let preds = dir.path().join("preds.jsonl");
    echo_references(&tasks, &preds);
    let results = dir.path().join("results.jsonl");
    let report = dir.path().join("report.json");
    ok(&[
        "score",
        "--tasks",
        s(&tasks),
        "--predictions",
        s(&preds),
        "--results",
        s(&results),
        "--report",
        s(&report),
    ]);
    let r = read_json(&report);
    assert_eq!(r["composite"]["composite"], 1.0);
    assert_eq!(r["micro_composite"]["composite"], 1.0);
    assert_eq!(r["missing_predictions"], 0);
    let rows = read_lines(&results);
    assert_eq!(rows.len(), read_lines(&tasks).len());
    for row in &rows {
        for key in ["task_id", "family", "metrics", "parse_kind"] {
            assert!(row.get(key).is_some(), "result lacks {key}");
        }
    }

    // The report can be rebuilt from the result records alone.
    let rebuilt = dir.path().join("rebuilt.json");
    ok(&["report", "--results", s(&results), "--out", s(&rebuilt)]);
    assert_eq!(read_json(&rebuilt)["families"], r["families"]);
}

#[test]
fn empty_predictions_give_maximal_error() {
    let dir = TempDir::new().unwrap();
    let (_, tasks) = corpus(&dir, 10);
    let preds = dir.path().join("preds.jsonl");
    fs::write(&preds, "").unwrap();
    let results = dir.path().join("results.jsonl");
    let report = dir.path().join("report.json");
    ok(&[
        "score",
        "--tasks",
        s(&tasks),
        "--predictions",
        s(&preds),
        "--results",
        s(&results),
        "--report",
        s(&report),
    ]);
    let n = read_lines(&tasks).len();
    let r = read_json(&report);
    assert_eq!(r["missing_predictions"], n);
    assert_eq!(r["composite"]["composite"], 0.0);
    for row in read_lines(&results) {
        assert_eq!(row["parse_kind"], "invalid");
        for (name, v) in row["metrics"].as_object().unwrap() {
            let want = if matches!(name.as_str(), "f1" | "recall" | "precision") {
                0.0
            } else {
                1.0
            };
            assert_eq!(v.as_f64(), Some(want), "{} {name}", row["task_id"]);
        }
    }
}

#[test]
fn make_tasks_is_byte_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let (pages, first) = corpus(&dir, 30);
    let second = dir.path().join("again.jsonl");
    ok(&[
        "--jobs",
        "1",
        "make-tasks",
        "--pages",
        s(&pages),
        "--seed",
        "5",
        "--out",
        s(&second),
    ]);
    assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    let third = dir.path().join("other_seed.jsonl");
    ok(&["make-tasks", "--pages", s(&pages), "--seed", "6", "--out", s(&third)]);
    assert_ne!(fs::read(&first).unwrap(), fs::read(&third).unwrap());
}

#[test]
fn make_tasks_family_filter() {
    let dir = TempDir::new().unwrap();
    let p = fixture("golden_page.jsonl");
    let out = dir.path().join("t.jsonl");
    ok(&[
        "make-tasks",
        "--pages",
        s(&p),
        "--families",
        "detection",
        "--granularities",
        "lines",
        "--out",
        s(&out),
    ]);
    let tasks = read_lines(&out);
    assert_eq!(tasks.len(), 1);
    assert_eq!(tasks[0]["family"], "detection");
    assert_eq!(tasks[0]["output_format"], "box");
}

#[test]
fn malformed_page_record_reports_line_number() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("pages.jsonl");
    fs::write(
        &p,
        "{\"id\":\"a\",\"image\":{\"width\":10,\"height\":10},\"lines\":[]}\n\n{\"id\":\"b\",\"image\":{\"width\":10},\"lines\":[]}\n",
    )
    .unwrap();
    let out = run(&["make-tasks", "--pages", s(&p)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");

    fs::write(
        &p,
        "{\"id\":\"a\",\"image\":{\"width\":0,\"height\":10},\"lines\":[]}\n",
    )
    .unwrap();
    let out = run(&["make-tasks", "--pages", s(&p)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn duplicate_prediction_is_an_error() {
    let dir = TempDir::new().unwrap();
    let (_, tasks) = corpus(&dir, 2);
    let preds = dir.path().join("preds.jsonl");
    fs::write(
        &preds,
        "{\"task_id\":\"x\",\"raw_output\":\"a\"}\n{\"task_id\":\"x\",\"raw_output\":\"b\"}\n",
    )
    .unwrap();
    let out = run(&["score", "--tasks", s(&tasks), "--predictions", s(&preds)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("\"x\""), "{err}");
}

#[test]
fn normalized_coordinates_are_rescaled() {
    let dir = TempDir::new().unwrap();
    let pages = dir.path().join("p.jsonl");
    fs::write(
        &pages,
        r#"{"id":"n","image":{"width":500,"height":1000},"lines":[{"text":"box me","bbox":[10,10,50,30]}]}"#,
    )
    .unwrap();
    let tasks = dir.path().join("t.jsonl");
    ok(&[
        "make-tasks",
        "--pages",
        s(&pages),
        "--families",
        "detection",
        "--granularities",
        "lines",
        "--out",
        s(&tasks),
    ]);
    let preds = dir.path().join("preds.jsonl");
    fs::write(
        &preds,
        "{\"task_id\":\"n/detection/lines\",\"raw_output\":\"[[20,10,100,30]]\"}\n",
    )
    .unwrap();
    let f1 = |coords: &str| {
        let report = dir.path().join("r.json");
        ok(&[
            "score",
            "--tasks",
            s(&tasks),
            "--predictions",
            s(&preds),
            "--coords",
            coords,
            "--report",
            s(&report),
        ]);
        read_json(&report)["families"]["detection"]["means"]["f1"]
            .as_f64()
            .unwrap()
    };
    assert_eq!(f1("normalized:1000"), 1.0);
    assert_eq!(f1("pixel"), 0.0);
    assert_eq!(
        run(&[
            "score",
            "--tasks",
            s(&tasks),
            "--predictions",
            s(&preds),
            "--coords",
            "bogus"
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn gen_fixtures_is_deterministic_and_handles_zero() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let z = dir.path().join("z.jsonl");
    ok(&["gen-fixtures", "--seed", "3", "--pages", "20", "--out", s(&a)]);
    ok(&[
        "--jobs",
        "1",
        "gen-fixtures",
        "--seed",
        "3",
        "--pages",
        "20",
        "--out",
        s(&b),
    ]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(read_lines(&a).len(), 20);
    ok(&["gen-fixtures", "--pages", "0", "--out", s(&z)]);
    assert!(fs::read(&z).unwrap().is_empty());
}

#[test]
fn repair_and_system_prompt_commands() {
    let dir = TempDir::new().unwrap();
    let raw = dir.path().join("raw.txt");
    fs::write(&raw, "Here you go:\n```json\n[{text: 'a', bbox: [1,2,3,4],},\n").unwrap();
    let out = ok(&["repair", "--input", s(&raw)]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v, serde_json::json!([{"text": "a", "bbox": [1, 2, 3, 4]}]));
    let out = ok(&["repair", "--input", s(&raw), "--format", "lines"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["parse_kind"], "spans");

    fs::write(&raw, "[1, 2, foo]").unwrap();
    assert_eq!(run(&["repair", "--input", s(&raw)]).status.code(), Some(1));

    let out = ok(&["system-prompt"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text
        .trim_end()
        .starts_with(groundeval_core::taskgen::SYSTEM_PROMPT.trim_end()));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(run(&["score"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}
