use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use semgen::checkpoint::Checkpoint;
use semgen::config::RunConfig;
use serde_json::Value;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn config(name: &str) -> String {
    repo().join("configs").join(name).to_str().unwrap().to_string()
}

fn semgen(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semgen"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("SEMGEN_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// Trains the memorization config briefly into `dir/train`.
fn quick_train(dir: &Path) -> PathBuf {
    let cfg = config("memorize.toml");
    ok(&semgen(dir, &["--config", &cfg, "-o", "train.max_epochs=2", "--out-dir", "train", "train"]));
    dir.join("train/model.ckpt")
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(semgen(tmp.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(semgen(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    let out = semgen(tmp.path(), &["--config", "missing.toml", "data", "stats"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: ") && err.trim_end().lines().count() == 1, "{err}");
    let cfg = config("mini.toml");
    let out = semgen(tmp.path(), &["--config", &cfg, "-o", "model.word_dim=0", "data", "stats"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_stats_match_the_recount() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("mini.toml");
    let stdout = ok(&semgen(
        tmp.path(),
        &["--config", &cfg, "-o", "data.split=[1.0, 0.0, 0.0]", "--out-dir", "s", "data", "stats"],
    ));
    let v: Value = serde_json::from_str(&read(tmp.path().join("s/stats.json"))).unwrap();
    let train = &v["splits"][0];
    assert_eq!(train["words"], 40);
    assert_eq!(train["entries"], 48);
    assert_eq!(train["tokens"], 368);
    assert_eq!(train["def_len"].as_f64().unwrap(), 368.0 / 48.0);
    assert_eq!(train["ctx_len"].as_f64().unwrap(), 630.0 / 99.0);
    assert_eq!(train["usage_len"].as_f64().unwrap(), 324.0 / 48.0);
    assert_eq!(v["splits"][1]["entries"], 0);
    assert!(stdout.contains("#Tokens") && stdout.contains("368") && stdout.contains("7.67"));
    assert!(read(tmp.path().join("s/stats.txt")).starts_with("# command: semgen --config"));
}

#[test]
fn split_manifest_covers_every_entry_once() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("mini.toml");
    ok(&semgen(tmp.path(), &["--config", &cfg, "--out-dir", "s", "data", "split"]));
    let manifest = read(tmp.path().join("s/splits.tsv"));
    let mut ids: Vec<&str> = manifest
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').next().unwrap())
        .collect();
    ids.sort_unstable();
    let expected: Vec<String> = (1..=48).map(|i| format!("mini-{i:03}")).collect();
    assert_eq!(ids, expected);
    for split in ["train", "valid", "test"] {
        let n = read(tmp.path().join(format!("s/{split}.jsonl"))).lines().count();
        assert_eq!(n, manifest.matches(&format!("\t{split}\n")).count());
    }
}

#[test]
fn data_dir_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_semgen"))
        .args(["--out-dir", "v", "data", "validate"])
        .current_dir(tmp.path())
        .env("SEMGEN_DATA_DIR", repo().join("data/mini"))
        .output()
        .unwrap();
    assert!(ok(&out).contains("accepted=48"));
    let cfg = read(tmp.path().join("v/config.toml"));
    assert!(cfg.contains("data/mini/corpus.jsonl") && cfg.contains("lm.txt"), "{cfg}");
}

#[test]
fn artifacts_carry_command_and_digest() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = quick_train(tmp.path());
    let dir = tmp.path().join("train");
    let recorded = read(dir.join("config.toml"));
    let cfg = RunConfig::from_toml(&recorded).unwrap();
    let digest = cfg.digest();
    let command = "semgen --config";
    for f in ["config.toml", "train_log.jsonl", "train_summary.json", "run.json"] {
        let text = read(dir.join(f));
        assert!(text.contains(&digest), "{f} lacks the digest");
        assert!(text.contains(command) && text.contains("train.max_epochs=2"), "{f} lacks the command");
        assert!(!text.contains("--out-dir"), "{f}");
    }
    let meta = Checkpoint::load(&ckpt).unwrap().meta;
    assert_eq!(meta["config_digest"], digest.as_str());
    assert!(meta["command"].as_str().unwrap().starts_with(command));
    assert!(!dir.join("FAILED").exists());

    let log = read(dir.join("train_log.jsonl"));
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["record"], "run");
    assert_eq!(first["seed"], 7);
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn seed_flag_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("mini.toml");
    ok(&semgen(tmp.path(), &["--config", &cfg, "--seed", "99", "--out-dir", "a", "data", "split"]));
    ok(&semgen(tmp.path(), &["--config", &cfg, "--out-dir", "b", "data", "split"]));
    let a = RunConfig::from_toml(&read(tmp.path().join("a/config.toml"))).unwrap();
    let b = RunConfig::from_toml(&read(tmp.path().join("b/config.toml"))).unwrap();
    assert_eq!(a.seed, 99);
    assert_ne!(a.digest(), b.digest());
    assert_ne!(read(tmp.path().join("a/splits.tsv")), read(tmp.path().join("b/splits.tsv")));
}

#[test]
fn eval_refuses_a_foreign_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = quick_train(tmp.path());
    let ckpt = ckpt.to_str().unwrap();
    let cfg = config("memorize.toml");
    let out = semgen(
        tmp.path(),
        &["--config", &cfg, "-o", "data.vocab_size=50", "--out-dir", "e", "eval", "--checkpoint", ckpt],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint mismatch"));
    assert!(tmp.path().join("e/FAILED").exists());
    let run: Value = serde_json::from_str(&read(tmp.path().join("e/run.json"))).unwrap();
    assert_eq!(run["status"], "failed");

    let stdout = ok(&semgen(
        tmp.path(),
        &["--config", &cfg, "--out-dir", "e", "eval", "--checkpoint", ckpt, "--split", "train"],
    ));
    assert!(stdout.contains("Perplexity (definition)"));
    assert!(!tmp.path().join("e/FAILED").exists());
    let summary: Value = serde_json::from_str(read(tmp.path().join("e/eval.jsonl")).lines().nth(1).unwrap()).unwrap();
    assert_eq!(summary["record"], "summary");
    assert_eq!(summary["entries"], 32);
}

#[test]
fn generate_for_two_contexts() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = quick_train(tmp.path());
    let cfg = config("memorize.toml");
    let stdout = ok(&semgen(
        tmp.path(),
        &[
            "--config",
            &cfg,
            "generate",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--word",
            "check",
            "--context",
            "she wrote a check for the rent",
            "--context",
            "please check the answers before you leave",
        ],
    ));
    let lines: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for l in &lines {
        assert_eq!(l["word"], "check");
        assert_eq!(l["unknown_word"], false);
        assert_eq!(l["word_in_context"], true);
        assert!(l["definition"].is_string());
        assert!(l["vocab_fingerprint"].as_str().unwrap().len() == 64);
    }
    assert_ne!(lines[0]["seed"], lines[1]["seed"]);

    let stdout = ok(&semgen(
        tmp.path(),
        &["--config", &cfg, "generate", "--checkpoint", ckpt.to_str().unwrap(), "--word", "zyzzyva", "--context", "a zyzzyva"],
    ));
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(v["unknown_word"], true);
}

#[test]
fn divergence_exits_with_internal_status() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("memorize.toml");
    let out = semgen(
        tmp.path(),
        &["--config", &cfg, "-o", "train.adam.lr=1e200", "-o", "train.max_epochs=3", "--out-dir", "t", "train"],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("t/FAILED").exists());
    assert!(tmp.path().join("t/train_log.jsonl").exists());
    assert!(!tmp.path().join("t/model.ckpt").exists());
}

#[test]
fn pretrain_then_warm_start() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("mini.toml");
    ok(&semgen(tmp.path(), &["--config", &cfg, "-o", "train.pretrain_epochs=2", "--out-dir", "p", "pretrain"]));
    assert_eq!(read(tmp.path().join("p/pretrain_log.jsonl")).lines().count(), 3);
    ok(&semgen(
        tmp.path(),
        &["--config", &cfg, "-o", "train.max_epochs=1", "--out-dir", "t", "train", "--init", "p/pretrain.ckpt"],
    ));
    let out = semgen(
        tmp.path(),
        &["--config", &cfg, "-o", "data.vocab_size=30", "--out-dir", "t2", "train", "--init", "p/pretrain.ckpt"],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablation_grid_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("memorize.toml");
    let stdout = ok(&semgen(
        tmp.path(),
        &["--config", &cfg, "-o", "data.split=[0.75, 0.0, 0.25]", "--out-dir", "a", "ablate", "--epochs", "1"],
    ));
    assert_eq!(stdout.lines().count(), 25);
    let records: Vec<Value> = read(tmp.path().join("a/ablation.jsonl"))
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 24);
    let params = |gate: bool, emb: &str, init: &str| {
        records
            .iter()
            .find(|r| r["gate"] == gate && r["embeddings"] == emb && r["init"] == init)
            .unwrap()["parameters"]
            .as_u64()
            .unwrap()
    };
    assert!(params(true, "+CH", "both") > params(false, "+CH", "both"));
    assert!(params(true, "W2V", "both") > params(true, "W2V", "zeros"));
    assert!(records.iter().all(|r| r["bleu"].is_number() && r["valid_ppl"].as_f64().unwrap() > 1.0));
}
