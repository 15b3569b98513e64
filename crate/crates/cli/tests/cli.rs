use std::fs;
use std::process::{Command, Output};

use serde_json::Value;

fn tsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsr")).args(args).output().expect("spawn tsr")
}

fn stdout_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&o.stdout)))
}

fn stderr_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let last = text.lines().last().expect("stderr is empty");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn vocab_lists_32_tokens() {
    let o = tsr(&["vocab"]);
    assert!(o.status.success());
    let v = stdout_json(&o);
    let entries = v.as_array().unwrap();
    assert_eq!(entries.len(), 32);
    assert_eq!(entries[0]["token"], "<sos>");
}

#[test]
fn tokenize_reports_unknown_tags() {
    let o = tsr(&["tokenize", "<thead><tr><td></td><th></th></tr></thead>"]);
    assert!(o.status.success());
    let v = stdout_json(&o);
    assert_eq!(v["unknown"], 2);
    assert_eq!(v["tokens"][0], "<thead>");
}

#[test]
fn teds_of_labels_against_themselves_is_100() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.jsonl");
    fs::write(
        &gt,
        concat!(
            r#"{"id": "a", "tokens": ["<tbody>", "<tr>", "<td>", "</td>", "<td>", "</td>", "</tr>", "</tbody>"]}"#,
            "\n",
            r#"{"id": "b", "tokens": ["<tbody>", "<tr>", "<td", " colspan=\"2\"", ">", "</td>", "</tr>", "<tr>", "<td>", "</td>", "<td>", "</td>", "</tr>", "</tbody>"]}"#,
            "\n"
        ),
    )
    .unwrap();
    let g = gt.to_str().unwrap();
    for args in [["teds", "--pred", g, "--gt", g], ["evaluate", "--pred", g, "--gt", g]] {
        let o = tsr(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let v = stdout_json(&o);
        assert_eq!(v["teds_simple"], 100.0);
        assert_eq!(v["teds_complex"], 100.0);
        assert_eq!(v["teds_all"], 100.0);
    }
}

#[test]
fn errors_are_json_with_nonzero_exit() {
    let o = tsr(&["teds", "--pred", "/nonexistent/p.jsonl", "--gt", "/nonexistent/g.jsonl"]);
    assert!(!o.status.success());
    let e = stderr_error(&o);
    assert!(e["error"].is_string());
    assert!(e["message"].as_str().unwrap().contains("/nonexistent"));

    let o = tsr(&["--set", "finetune.epochs=many", "vocab"]);
    assert!(o.status.success(), "vocab does not read the config");
    let o = tsr(&["--set", "model.d_model=0", "synth", "--out", "/tmp/never", "--n", "1"]);
    assert!(!o.status.success());
    assert_eq!(stderr_error(&o)["error"], "ConfigError");
}

#[test]
fn malformed_prediction_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.jsonl");
    fs::write(&p, "{\"id\": \"a\", \"tokens\": [\"<tr>\"]}\nnot json\n").unwrap();
    let ps = p.to_str().unwrap();
    let o = tsr(&["teds", "--pred", ps, "--gt", ps]);
    assert!(!o.status.success());
    assert_eq!(stderr_error(&o)["error"], "MalformedRecord");
}

#[test]
fn synth_writes_a_90_10_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = tsr(&["synth", "--out", out.to_str().unwrap(), "--n", "1000", "--max-rows", "4", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["total"], 1000);
    assert_eq!(v["train"], 900);
    assert_eq!(v["val"], 100);
    let labels = fs::read_to_string(out.join("labels.jsonl")).unwrap();
    assert_eq!(labels.lines().count(), 1000);
    assert_eq!(fs::read_dir(out.join("images")).unwrap().count(), 1000);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = tsr(&["synth", "--out", data.to_str().unwrap(), "--n", "16"]);
    assert!(o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_tsr"))
        .env("TSR_OUTPUT_DIR", dir.path().join("runs"))
        .args(["--set", "vqvae.epochs=1", "--set", "seed=5", "train-vqvae", "--data", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(runs.len(), 1);
    assert!(runs[0].starts_with("vqvae-") && runs[0].ends_with("-s5"), "{}", runs[0]);
    assert!(dir.path().join("runs").join(&runs[0]).join("manifest.json").exists());
}
