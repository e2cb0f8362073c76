use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lowres-mt"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary on stdout")
}

fn error_report(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(err.lines().last().expect("error line")).expect("structured error")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_evaluate_reaches_bleu_90() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model");
    let eval = dir.path().join("eval");
    ok(&["synth", "--n", "64", "--seed", "1", "--out", s(&data)]);
    let corpus = data.join("corpus.tsv");
    let cfg = configs().join("t1_tiny.json");
    ok(&["train", "--config", s(&cfg), "--train", s(&corpus), "--out", s(&model)]);
    let summary = ok(&[
        "evaluate",
        "--data",
        s(&corpus),
        "--model",
        s(&model.join("model.ckpt")),
        "--bpe",
        s(&model.join("merges.txt")),
        "--vocab",
        s(&model.join("vocab.txt")),
        "--out",
        s(&eval),
    ]);
    assert!(summary["bleu"].as_f64().unwrap() >= 90.0, "{summary}");
    for d in [&data, &model, &eval] {
        assert!(d.join("resolved_config.json").exists());
        assert!(d.join("summary.json").exists());
    }
    let resolved: Value = serde_json::from_str(&fs::read_to_string(model.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["config"]["token_batch_size"], 128);
    assert_eq!(resolved["seed"], 1);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "32", "--seed", "3", "--out", s(&data)]);
    let corpus = data.join("corpus.tsv");
    let cfg = configs().join("t1_tiny.json");
    let mut outputs = Vec::new();
    for run_dir in ["a", "b"] {
        let out = dir.path().join(run_dir);
        ok(&[
            "train", "--config", s(&cfg), "--seed", "5", "--set", "epochs=6", "--set", "validate_every=3",
            "--train", s(&corpus), "--out", s(&out),
        ]);
        outputs.push(out);
    }
    for f in ["model.ckpt", "summary.json", "history.jsonl", "vocab.txt", "merges.txt"] {
        assert_eq!(fs::read(outputs[0].join(f)).unwrap(), fs::read(outputs[1].join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn identical_hypotheses_score_100() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    fs::write(&h, "the cat sat on the mat\na b c d e\n").unwrap();
    let summary = ok(&["evaluate", "--hyp", s(&h), "--ref", s(&h), "--out", s(&dir.path().join("e"))]);
    assert_eq!(summary["bleu"].as_f64(), Some(100.0));
    assert_eq!(summary["chrf"].as_f64(), Some(100.0));
}

#[test]
fn missing_batch_size_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "8", "--out", s(&data)]);
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(configs().join("t1_tiny.json")).unwrap()).unwrap();
    cfg.as_object_mut().unwrap().remove("token_batch_size");
    let cfg_path = dir.path().join("cfg.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = run(&[
        "train", "--config", s(&cfg_path), "--train", s(&data.join("corpus.tsv")), "--out", s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let report = error_report(&out);
    assert_eq!(report["error"], "config");
    assert!(report["message"].as_str().unwrap().contains("token_batch_size"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "8", "--out", s(&data)]);
    let out = run(&[
        "split", "--input", s(&data.join("corpus.tsv")), "--set", "ratio=0.5", "--out", s(&dir.path().join("x")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["split", "--input", "/definitely/not/here.tsv", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_report(&out)["error"], "missing_file");
}

#[test]
fn diverging_loss_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "16", "--out", s(&data)]);
    let out = run(&[
        "train", "--config", s(&configs().join("t1_tiny.json")), "--set", "lr_initial=1e30", "--set", "epochs=3",
        "--train", s(&data.join("corpus.tsv")), "--out", s(&dir.path().join("m")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn preprocess_split_and_bpe_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.tsv");
    fs::write(
        &raw,
        "Bonjour le monde\tI ni ce\nBonjour le monde\tI ni ce\nvoir https://x.org\tlink\nun deux\tkelen fila\n",
    )
    .unwrap();
    let clean = dir.path().join("clean");
    let report = ok(&["preprocess", "--input", s(&raw), "--out", s(&clean)]);
    assert_eq!(report["input_count"], 4);
    assert_eq!(report["output_count"], 2);
    assert_eq!(report["dropped_by_rule"]["duplicate"], 1);
    assert_eq!(report["dropped_by_rule"]["link"], 1);

    let bpe = dir.path().join("bpe");
    let summary = ok(&["bpe-learn", "--input", s(&clean.join("clean.tsv")), "--set", "num_merges=3", "--out", s(&bpe)]);
    assert!(summary["merges"].as_u64().unwrap() <= 3);
    let text = dir.path().join("text.txt");
    fs::write(&text, "Bonjour le monde\n").unwrap();
    let seg = dir.path().join("seg");
    ok(&["bpe-apply", "--bpe", s(&bpe.join("merges.txt")), "--input", s(&text), "--out", s(&seg)]);
    let segmented = fs::read_to_string(seg.join("segmented.txt")).unwrap();
    let tokens: Vec<&str> = segmented.split_whitespace().collect();
    assert_eq!(lowres_mt_decode(&tokens), "Bonjour le monde");
}

/// Inverse of the continuation-marker segmentation.
fn lowres_mt_decode(tokens: &[&str]) -> String {
    tokens.join(" ").replace("@@ ", "")
}
