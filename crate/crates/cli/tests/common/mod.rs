use std::path::Path;
use std::process::{Command, Output};

/// Runs the `codemark` binary in `dir`.
pub fn codemark(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_codemark")).args(args).current_dir(dir).output().expect("spawn codemark")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok(dir: &Path, args: &[&str]) -> String {
    let o = codemark(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

/// The small end-to-end pipeline used by several tests: corpus, base model,
/// a briefly warmed and trained policy, completions and reports.
#[allow(dead_code)]
pub const PIPELINE: &[&[&str]] = &[
    &["corpus-gen", "--count", "150", "--out", "corpus.jsonl", "--seed", "3"],
    &["fit-lm", "--corpus", "corpus.jsonl", "--out", "lm.txt"],
    &["sft", "--corpus", "corpus.jsonl", "--base-lm", "lm.txt", "--out", "sft.ckpt", "--sft-steps", "20", "--sft-tasks", "40"],
    &[
        "train", "--corpus", "corpus.jsonl", "--base-lm", "lm.txt", "--init", "sft.ckpt", "--out", "policy.ckpt",
        "--steps", "3", "--group-size", "4", "--eval-tasks", "6", "--eval-interval", "1",
    ],
    &["generate", "--corpus", "corpus.jsonl", "--base-lm", "lm.txt", "--policy", "policy.ckpt", "--out", "gen.jsonl", "--tasks", "8", "--text-dir", "txt"],
    &["eval", "--corpus", "corpus.jsonl", "--base-lm", "lm.txt", "--policy", "policy.ckpt", "--out", "eval.json", "--tasks", "12", "--samples", "3", "--csv", "scores.csv"],
    &["attack-eval", "--corpus", "corpus.jsonl", "--base-lm", "lm.txt", "--policy", "policy.ckpt", "--out", "attack.json", "--tasks", "12", "--samples", "3"],
];
