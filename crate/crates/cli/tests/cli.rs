//! End-to-end checks of the `dmiforge` binary: argument handling, exit
//! codes, and a miniature pipeline run driven entirely through the CLI.

use std::path::Path;
use std::process::{Command, Output};

fn dmiforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmiforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, out_dir: &Path, extra_train: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.json");
    let json = format!(
        r#"{{
  "data": {{"synth": {{"spec": {{"n_slots": 3, "values_per_slot": 3, "n_clean": 30, "n_unlabeled_mrs": 12, "seed": 0}}}}}},
  "clean_budget": {{"count": 8}},
  "weak": {{"annotate": {{"noise": {{"p_drop": 0.1, "p_hallucinate": 0.1, "p_lexical": 0.05, "seed": 0}}}}}},
  "filter_threshold": 0.3,
  "train": {{"batch": 4, "max_steps": 8, "eval_every": 4, "patience": 50, "base_lr": 0.01{}}},
  "model": {{"embed_dim": 8, "hidden_dim": 8, "latent_dim": 6, "encoder_layers": 1, "max_decode_len": 25}},
  "out_dir": {:?},
  "seeds": [3],
  "baselines": ["step1"]
}}"#,
        extra_train,
        out_dir.to_str().unwrap()
    );
    std::fs::write(&path, json).unwrap();
    path
}

#[test]
fn help_lists_every_subcommand() {
    let out = dmiforge(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for name in [
        "pipeline",
        "augment",
        "annotate",
        "train-teacher",
        "filter",
        "pretrain-student",
        "score",
        "finetune",
        "evaluate",
    ] {
        assert!(text.contains(name), "help is missing {}", name);
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = dmiforge(&["pipeline", "--nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = dmiforge(&["score"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("out"), "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"filter_threshold\": 0.3", "\"filter_threshold\": 1.5");
    std::fs::write(&cfg, text).unwrap();
    let out = dmiforge(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &dir.path().join("out"), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        r#"{"synth": {"spec": {"n_slots": 3, "values_per_slot": 3, "n_clean": 30, "n_unlabeled_mrs": 12, "seed": 0}}}"#,
        r#"{"e2e_csv": {"path": "/nonexistent/data.csv"}}"#,
    );
    std::fs::write(&cfg, text).unwrap();
    let out = dmiforge(&["train-teacher", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn non_finite_loss_is_a_divergence_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &dir.path().join("out"),
        r#", "optimizer": "sgd""#,
    );
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("\"base_lr\": 0.01", "\"base_lr\": 1e300");
    std::fs::write(&cfg, text).unwrap();
    let out = dmiforge(&["train-teacher", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_then_stage_and_checkpoint_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let cfg = write_config(dir.path(), &out_dir, "");
    let cfg = cfg.to_str().unwrap();

    let run = Command::new(env!("CARGO_BIN_EXE_dmiforge"))
        .args(["pipeline", "--config", cfg])
        .env("RUST_LOG", "warn")
        .env("DMIFORGE_THREADS", "2")
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(stdout.contains("step1+2:"), "summary missing: {}", stdout);
    assert!(out_dir.join("aggregate.json").exists());
    assert!(out_dir.join("sweep.csv").exists());
    let seed_dir = out_dir.join("seed3");
    assert!(seed_dir.join("final.ckpt").exists());

    // stage subcommand against the same directory reuses the cache
    let score = dmiforge(&["score", "--config", cfg]);
    assert!(score.status.success());
    let printed = String::from_utf8_lossy(&score.stdout);
    assert!(printed.contains("dmi.jsonl"), "got {}", printed);

    // checkpoint mode scores an arbitrary CSV and writes metrics JSON
    let csv = dir.path().join("test.csv");
    std::fs::write(
        &csv,
        "mr,ref\n\"s0[v0], s1[v1]\",\"the v0 thing has v1\"\n\"s0[v2]\",\"plain v2 entry\"\n",
    )
    .unwrap();
    let metrics = dir.path().join("m.json");
    let eval = dmiforge(&[
        "evaluate",
        "--ckpt",
        seed_dir.join("final.ckpt").to_str().unwrap(),
        "--test",
        csv.to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
    ]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert!(report["bleu"]["bleu"].is_number());
    assert!(report["nlu"]["joint_accuracy"].is_number());

    // --out redirects a stage into a fresh directory
    let other = dir.path().join("elsewhere");
    let ann = dmiforge(&["annotate", "--config", cfg, "--out", other.to_str().unwrap()]);
    assert!(ann.status.success());
    assert!(other.join("seed3").join("weak_raw.jsonl").exists());
}
