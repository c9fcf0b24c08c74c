use std::path::Path;
use std::process::{Command, Output};

fn docdial(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docdial")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = docdial(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "train", "--data", s(data), "--out", s(out), "--d-model", "16", "--heads", "2", "--enc-layers", "1",
        "--dec-layers", "1", "--d-ff", "32", "--epochs", "1",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn split_keeps_ceiling_fraction_of_dialogues() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--seed", "2", "--dialogues", "64", "--docs", "4", "--out", s(&data)]);
    for (frac, expected) in [("1/32", 2), ("1/16", 4), ("1/4", 16), ("1", 64)] {
        let out = tmp.path().join(frac.replace('/', "_"));
        ok(&["split", "--data", s(&data), "--fraction", frac, "--seed", "0", "--out", s(&out)]);
        let lines = std::fs::read_to_string(out.join("dialogues.jsonl")).unwrap().lines().count();
        assert_eq!(lines, expected, "fraction {frac}");
    }
    let bad = docdial(&["split", "--data", s(&data), "--fraction", "1/3", "--out", s(&tmp.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["synth", "--seed", "1", "--dialogues", "3", "--docs", "2", "--out", s(&data)]);
    tiny_train(&data, &run, &[]);
    let ck = run.join("checkpoint.bin");
    let mut bytes = std::fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n - 10] ^= 0x01;
    std::fs::write(&ck, bytes).unwrap();
    let out = docdial(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&tmp.path().join("ev"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checksum"), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(docdial(&["train"]).status.code(), Some(2));
    assert_eq!(docdial(&["train", "--data", "d", "--out", "o", "--tasks", "aux"]).status.code(), Some(2));
    assert_eq!(docdial(&["bogus"]).status.code(), Some(2));
    assert_eq!(docdial(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--seed", "1", "--dialogues", "4", "--docs", "2", "--out", s(&data)]);
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nepochs = 2\nbatch_size = 2\ntasks = \"main\"\nlabel = \"from-file\"\n").unwrap();
    let run = tmp.path().join("run");
    tiny_train(&data, &run, &["--config", s(&cfg), "--label", "from-flag"]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["epochs"], 1);
    assert_eq!(manifest["config"]["train"]["batch_size"], 2);
    assert_eq!(manifest["config"]["train"]["label"], "from-flag");
    assert_eq!(manifest["config"]["task_options"]["enable_aux"], false);
    assert!(manifest["inputs"].as_array().unwrap().iter().any(|e| e["path"] == s(&cfg)));

    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 0);
    assert_eq!(first["tau"], 1.0);
}

#[test]
fn dump_instances_and_predictions_round_trip_through_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["synth", "--seed", "3", "--dialogues", "4", "--docs", "2", "--out", s(&data)]);
    let dump = tmp.path().join("instances.jsonl");
    tiny_train(&data, &run, &["--dump-instances", s(&dump), "--label", "tiny"]);
    let n_instances = std::fs::read_to_string(&dump).unwrap().lines().count();
    assert_eq!(n_instances % 3, 0);

    let preds = tmp.path().join("preds.jsonl");
    let ck = run.join("checkpoint.bin");
    ok(&["predict", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&preds), "--max-output-len", "8"]);
    assert!(tmp.path().join("preds.jsonl.manifest.json").exists());
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), n_instances / 3);

    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&a), "--max-output-len", "8", "--fraction", "1/4"]);
    ok(&["eval", "--predictions", s(&preds), "--data", s(&data), "--out", s(&b), "--label", "tiny"]);
    let ra: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("report.json")).unwrap()).unwrap();
    let rb: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(b.join("report.json")).unwrap()).unwrap();
    for key in ["em", "f1", "bleu", "n_examples", "n_parse_failures"] {
        assert_eq!(ra[key], rb[key], "{key}");
    }
    assert_eq!(ra["label"], "tiny");
    assert_eq!(ra["fraction"], "1/4");
    assert_eq!(ra["flags"]["max_output_len"], "8");

    let merged = ok(&["report", s(&a.join("report.tsv")), s(&b.join("report.tsv"))]);
    let text = String::from_utf8(merged.stdout).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "label\tfraction\tem\tf1\tbleu\tn\tparse_failures");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("tiny\t1/4\t") && rows[2].starts_with("tiny\t1\t"), "{text}");
}
