use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use regex::Regex;
use serde_json::Value;

use kgetool::dataset::{examine_call, load_dataset, load_tools, to_normalized_json};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn kgetool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgetool"))
        .args(args)
        .current_dir(fixtures())
        .output()
        .unwrap()
}

#[test]
fn validate_reports_fixture_statistics() {
    let out = kgetool(&[
        "validate", "--strict", "--kg", "family_kg.json", "--dataset", "dataset.json", "--tools", "tools.json",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["dataset"]["samples"], 20);
    assert_eq!(v["dataset"]["tools"], 7);
    assert_eq!(v["validation"]["flags"].as_array().unwrap().len(), 0);

    let raw: Vec<Value> = serde_json::from_str(&fs::read_to_string(fixtures().join("dataset.json")).unwrap()).unwrap();
    let link = Regex::new(r"\[[^\[\],]+,[^\[\],]+,[^\[\],]+\]").unwrap();
    let mut want: BTreeMap<String, u64> = BTreeMap::new();
    for s in &raw {
        let hops = link.find_iter(s["question"].as_str().unwrap()).count();
        *want.entry(hops.to_string()).or_default() += 1;
    }
    let got: BTreeMap<String, u64> = serde_json::from_value(v["dataset"]["hop_histogram"].clone()).unwrap();
    assert_eq!(got, want);

    let kg: Value = serde_json::from_str(&fs::read_to_string(fixtures().join("family_kg.json")).unwrap()).unwrap();
    let edges = kg.as_array().map(Vec::len).unwrap_or_else(|| kg["triples"].as_array().unwrap().len());
    assert_eq!(v["kg"]["edges"], edges);
}

#[test]
fn golden_replay_run_succeeds_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = kgetool(&[
        "run", "--config", "config.json", "--mode", "golden", "--replay", "replay.jsonl",
        "--output", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("mode: golden"));
    for f in ["config.json", "raw_io.jsonl", "samples.jsonl", "summary.json", "summary.txt"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["aggregates"]["tool_use"]["em"], 100.0);
}

#[test]
fn config_errors_exit_with_status_two() {
    let out = kgetool(&["run", "--config", "config.json", "--k", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let out = kgetool(&["run", "--mode", "nonsense"]);
    assert_eq!(out.status.code(), Some(2));
    let out = kgetool(&["run", "--config", "config.json", "--mode", "extracted", "--replay", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn tooluse_grades_a_calls_file() {
    let dir = tempfile::tempdir().unwrap();
    let calls = dir.path().join("calls.jsonl");
    fs::write(
        &calls,
        concat!(
            "{\"id\": \"fx_01\", \"text\": \"{\\\"name\\\": \\\"order_food\\\", \\\"parameters\\\": {\\\"food\\\": \\\"food_0001\\\", \\\"quantity\\\": 2}}\"}\n",
            "{\"id\": \"fx_02\", \"text\": \"I cannot help with that.\"}\n",
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("graded");
    let out = kgetool(&[
        "tooluse", "--calls", calls.to_str().unwrap(), "--dataset", "dataset.json",
        "--output", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    let t = &summary["aggregates"]["tool_use"];
    assert_eq!(t["samples"], 2);
    assert_eq!(t["em"], 50.0);
    assert_eq!(t["tool_call_rate"], 50.0);
}

#[test]
fn fixture_dataset_is_self_consistent() {
    let samples = load_dataset(&fs::read_to_string(fixtures().join("dataset.json")).unwrap()).unwrap();
    let tools = load_tools(&fs::read_to_string(fixtures().join("tools.json")).unwrap()).unwrap();
    let again = load_dataset(&to_normalized_json(&samples)).unwrap();
    assert_eq!(again, samples);
    for s in &samples {
        let doc = tools.iter().find(|t| t.name == s.gold_call.name).unwrap();
        assert!(examine_call(&s.gold_call, doc).passed(), "{}", s.id);
    }
}
