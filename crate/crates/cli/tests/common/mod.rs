#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMALL_CONFIG: &str = "\
seed = 7
variants_per_segment = 1
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_seq_len = 48
pretrain_steps = 30
pretrain_eval_every = 10
pretrain_batch_size = 8
pretrain_learning_rate = 1e-3
finetune_steps = 30
finetune_eval_every = 10
finetune_batch_size = 8
finetune_learning_rate = 1e-3
skew_alpha_train = 1.5
skew_alpha_test = 1.5
";

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_synthmetric"));
    c.env_remove("SYNTHMETRIC_SCORER_CMD");
    c
}

pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

/// Runs the binary in `dir` and returns its output.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Files the full chain writes, relative to its directory.
pub const CHAIN_OUTPUTS: &[&str] = &[
    "pairs.jsonl",
    "vocab.txt",
    "signals.jsonl",
    "pre.ckpt",
    "pre.ckpt.manifest.json",
    "ft.ckpt",
    "ft.ckpt.manifest.json",
    "preds.tsv",
    "report.json",
    "train.tsv",
    "test.tsv",
];

/// gen-pairs, compute-signals, pretrain, finetune, predict, evaluate and
/// skew-split on the bundled demo data, writing into `dir`.
pub fn full_chain(dir: &Path, jobs: &str) {
    std::fs::write(dir.join("run.toml"), SMALL_CONFIG).unwrap();
    let corpus = data_dir().join("corpus.txt");
    let ratings = data_dir().join("ratings.tsv");
    let (corpus, ratings) = (corpus.to_str().unwrap(), ratings.to_str().unwrap());
    let base = ["--config", "run.toml", "--jobs", jobs];
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen-pairs", "--corpus", corpus, "--extra-text", ratings, "--out", "pairs.jsonl", "--vocab-out", "vocab.txt"],
        vec!["compute-signals", "--pairs", "pairs.jsonl", "--vocab", "vocab.txt", "--out", "signals.jsonl"],
        vec!["pretrain", "--signals", "signals.jsonl", "--vocab", "vocab.txt", "--out", "pre.ckpt"],
        vec!["finetune", "--ratings", ratings, "--vocab", "vocab.txt", "--init", "pre.ckpt", "--out", "ft.ckpt"],
        vec!["predict", "--model", "ft.ckpt", "--vocab", "vocab.txt", "--input", ratings, "--out", "preds.tsv"],
        vec!["evaluate", "--ratings", ratings, "--predictions", "preds.tsv", "--out", "report.json"],
        vec!["skew-split", "--ratings", ratings, "--train-out", "train.tsv", "--test-out", "test.tsv"],
    ];
    for step in steps {
        let args: Vec<&str> = base.iter().copied().chain(step).collect();
        ok(dir, &args);
    }
}
