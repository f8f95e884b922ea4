//! Drives the compiled binary through the whole workflow on a tiny
//! configuration: fixtures, corpus preparation, tokenizer training, both
//! training stages, generation, and evaluation, plus the exit-code
//! contract.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparqlgen"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("binary runs").status.code().expect("no signal")
}

const TINY_CONFIG: &str = r#"
seed = 5

[tokenizer]
vocab_size = 160

[model]
hidden = 16
layers = 1
heads = 2
ffn = 32
max_positions = 40

[training]
lr = 1e-3
batch_size = 8
pretrain_epochs = 1
finetune_epochs = 1

[decoding]
beam_width = 2
max_len = 20
"#;

#[test]
fn the_whole_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("run.toml");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let cfg_arg = config.to_str().unwrap();

    run_ok(bin().args([
        "make-fixtures",
        "--config",
        cfg_arg,
        "--out-dir",
        root.join("fixtures").to_str().unwrap(),
        "--templates",
        "4",
    ]));
    let fixtures = root.join("fixtures");
    for name in ["fixtures.en", "fixtures.sparql", "pretrain.txt"] {
        assert!(fixtures.join(name).exists(), "{name} missing");
    }

    run_ok(bin().args([
        "prepare-corpus",
        "--input",
        fixtures.join("fixtures.sparql").to_str().unwrap(),
        "--output",
        root.join("encoded.txt").to_str().unwrap(),
        "--report",
        root.join("clean.json").to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(root.join("clean.json")).unwrap()).unwrap();
    assert_eq!(report["rejected"], 0);
    assert_eq!(report["written"], report["accepted"]);
    let encoded = std::fs::read_to_string(root.join("encoded.txt")).unwrap();
    let pretrain_txt = std::fs::read_to_string(fixtures.join("pretrain.txt")).unwrap();
    assert_eq!(sorted_lines(&encoded), sorted_lines(&pretrain_txt), "round trip drifted");

    run_ok(bin().args([
        "train-tokenizer",
        "--config",
        cfg_arg,
        "--input",
        fixtures.join("fixtures.en").to_str().unwrap(),
        "--input",
        fixtures.join("pretrain.txt").to_str().unwrap(),
        "--output",
        root.join("vocab.txt").to_str().unwrap(),
    ]));
    let vocab = std::fs::read_to_string(root.join("vocab.txt")).unwrap();
    assert!(vocab.lines().count() > 5 && vocab.lines().count() <= 160);
    assert_eq!(vocab.lines().next(), Some("[PAD]"));

    run_ok(bin().args([
        "pretrain",
        "--config",
        cfg_arg,
        "--corpus",
        fixtures.join("pretrain.txt").to_str().unwrap(),
        "--vocab",
        root.join("vocab.txt").to_str().unwrap(),
        "--output",
        root.join("pretrained.ckpt").to_str().unwrap(),
    ]));
    assert!(root.join("pretrained.ckpt").exists());

    run_ok(bin().args([
        "finetune",
        "--config",
        cfg_arg,
        "--data",
        fixtures.join("fixtures").to_str().unwrap(),
        "--vocab",
        root.join("vocab.txt").to_str().unwrap(),
        "--encoder",
        root.join("pretrained.ckpt").to_str().unwrap(),
        "--out-dir",
        root.join("model").to_str().unwrap(),
    ]));
    assert!(root.join("model/encoder.ckpt").exists());
    assert!(root.join("model/decoder.ckpt").exists());

    let questions: Vec<String> = std::fs::read_to_string(fixtures.join("fixtures.en"))
        .unwrap()
        .lines()
        .take(3)
        .map(str::to_string)
        .collect();
    std::fs::write(root.join("questions.txt"), questions.join("\n") + "\n").unwrap();
    run_ok(bin().args([
        "generate",
        "--config",
        cfg_arg,
        "--encoder",
        root.join("model/encoder.ckpt").to_str().unwrap(),
        "--decoder",
        root.join("model/decoder.ckpt").to_str().unwrap(),
        "--vocab",
        root.join("vocab.txt").to_str().unwrap(),
        "--input",
        root.join("questions.txt").to_str().unwrap(),
        "--output",
        root.join("predictions.txt").to_str().unwrap(),
    ]));
    let predictions = std::fs::read_to_string(root.join("predictions.txt")).unwrap();
    assert_eq!(predictions.lines().count(), 3);

    let references: Vec<String> =
        std::fs::read_to_string(root.join("encoded.txt")).unwrap().lines().take(3).map(str::to_string).collect();
    std::fs::write(root.join("references.txt"), references.join("\n") + "\n").unwrap();
    let out = run_ok(bin().args([
        "evaluate",
        "--candidates",
        root.join("predictions.txt").to_str().unwrap(),
        "--references",
        root.join("references.txt").to_str().unwrap(),
        "--report",
        root.join("eval.json").to_str().unwrap(),
    ]));
    let stdout_report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("stdout is the report JSON");
    assert_eq!(stdout_report["n_samples"], 3);
    assert!(stdout_report["bleu"].as_f64().unwrap() >= 0.0);
    assert!(root.join("eval.json").exists());
}

fn sorted_lines(text: &str) -> Vec<&str> {
    let mut lines: Vec<&str> = text.lines().collect();
    lines.sort_unstable();
    lines
}

#[test]
fn validation_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // config that fails cross-field validation
    let bad_config = root.join("bad.toml");
    std::fs::write(&bad_config, "[model]\nhidden = 10\nheads = 3\n").unwrap();
    std::fs::write(root.join("corpus.txt"), "select var_a where\n").unwrap();
    std::fs::write(root.join("vocab.txt"), "[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\n").unwrap();
    let code = exit_code(bin().args([
        "pretrain",
        "--config",
        bad_config.to_str().unwrap(),
        "--corpus",
        root.join("corpus.txt").to_str().unwrap(),
        "--vocab",
        root.join("vocab.txt").to_str().unwrap(),
        "--output",
        root.join("out.ckpt").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);

    // mismatched evaluation corpora
    std::fs::write(root.join("c.txt"), "a\nb\n").unwrap();
    std::fs::write(root.join("r.txt"), "a\n").unwrap();
    let code = exit_code(bin().args([
        "evaluate",
        "--candidates",
        root.join("c.txt").to_str().unwrap(),
        "--references",
        root.join("r.txt").to_str().unwrap(),
    ]));
    assert_eq!(code, 2);

    // unknown flags are a usage error
    let code = exit_code(bin().args(["evaluate", "--no-such-flag"]));
    assert_eq!(code, 2);
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("r.txt"), "a\n").unwrap();
    let code = exit_code(bin().args([
        "evaluate",
        "--candidates",
        root.join("missing.txt").to_str().unwrap(),
        "--references",
        root.join("r.txt").to_str().unwrap(),
    ]));
    assert_eq!(code, 1);
}
