//! End-to-end exercises of the `poisonlab` binary: subcommands, exit
//! codes, and the artifacts they leave on disk.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_poisonlab"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("poisonlab_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("exp.conf");
    let text = format!(
        "dataset.per_class = 30\n\
         dataset.height = 8\n\
         dataset.width = 8\n\
         plan.lambda = 0.3\n\
         model.conv = 4x3s2\n\
         model.hidden_dim = 8\n\
         train.batch_size = 8\n\
         train.learning_rate = 0.003\n\
         train.max_epochs = 3\n\
         train.patience = 3\n\
         train.retrain_epochs = 2\n\
         seed = 5\n\
         {extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn missing_subcommand_and_bad_config_exit_1() {
    let out = bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let dir = temp_dir("badcfg");
    let cfg = dir.join("bad.conf");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn unknown_flag_exits_1() {
    let out = bin().args(["matrix", "--frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn poison_train_retrain_eval_flow() {
    let dir = temp_dir("flow");
    let out_dir = dir.join("run");
    let cfg = write_config(&dir, &format!("output = {}\n", out_dir.display()));

    let poison = bin().args(["poison", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(poison.status.code(), Some(0), "{}", String::from_utf8_lossy(&poison.stderr));
    for artifact in ["poison_train", "poison_val", "adv_test", "partition.manifest", "poison_report.csv", "trigger/values.bdtf", "trigger/mask.bdtf"] {
        assert!(out_dir.join(artifact).exists(), "missing {artifact}");
    }
    let report = std::fs::read_to_string(out_dir.join("poison_report.csv")).unwrap();
    assert!(report.starts_with("t,total,P_1,P_2,P_3,p\n"), "{report}");

    let train = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(train.status.code(), Some(0), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(out_dir.join("checkpoint").join("spec.txt").exists());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3, "header + 3 base epochs:\n{metrics}");

    let retrain = bin().args(["retrain", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(retrain.status.code(), Some(0), "{}", String::from_utf8_lossy(&retrain.stderr));
    assert!(out_dir.join("checkpoint_retrained").join("spec.txt").exists());
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 + 2, "plus 2 retrain epochs:\n{metrics}");
    assert!(metrics.contains(",retrain,"));

    let eval = bin().args(["eval", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(eval.status.code(), Some(0), "{}", String::from_utf8_lossy(&eval.stderr));
    let text = String::from_utf8_lossy(&eval.stdout);
    assert!(text.contains("checkpoint_retrained"), "{text}");
    assert!(text.contains("adv_success"), "{text}");

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn matrix_summarize_replay_flow() {
    let dir = temp_dir("matrix");
    let csv = dir.join("results.csv");
    let cfg = write_config(
        &dir,
        &format!("trigger.kind = square, sine\nrepeats = 2\noutput = {}\n", csv.display()),
    );

    let matrix = bin().args(["matrix", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(matrix.status.code(), Some(0), "{}", String::from_utf8_lossy(&matrix.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    // 4 runs x (3 base + 2 retrain) epochs + header.
    assert_eq!(text.lines().count(), 1 + 4 * 5, "{text}");
    assert!(text.starts_with("run_id,phase,epoch,dataset,trigger,alpha,lambda,strategy,"));

    // Summarize writes a CSV and prints an aligned table.
    let summary_csv = dir.join("summary.csv");
    let summarize = bin()
        .arg("summarize")
        .arg(&csv)
        .args(["--out"])
        .arg(&summary_csv)
        .output()
        .unwrap();
    assert_eq!(summarize.status.code(), Some(0));
    let table = String::from_utf8_lossy(&summarize.stdout);
    assert!(table.contains("adv_success"));
    let summary = std::fs::read_to_string(&summary_csv).unwrap();
    // 2 triggers x 2 phases + header.
    assert_eq!(summary.lines().count(), 1 + 4, "{summary}");

    // Replay one run id: its rows must match the matrix rows exactly.
    let run_id = text.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    let replay = bin()
        .args(["replay", "--config"])
        .arg(&cfg)
        .args(["--replay", &run_id])
        .output()
        .unwrap();
    assert_eq!(replay.status.code(), Some(0), "{}", String::from_utf8_lossy(&replay.stderr));
    let replay_out = String::from_utf8_lossy(&replay.stdout);
    let matrix_rows: Vec<&str> =
        text.lines().filter(|l| l.starts_with(&run_id)).collect();
    let replay_rows: Vec<&str> =
        replay_out.lines().filter(|l| l.starts_with(&run_id)).collect();
    assert_eq!(matrix_rows, replay_rows);

    // Unknown run id is a usage error.
    let bad = bin()
        .args(["replay", "--config"])
        .arg(&cfg)
        .args(["--replay", "doesnotexist"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn matrix_is_bitwise_deterministic_across_jobs() {
    let dir = temp_dir("determinism");
    let csv1 = dir.join("a.csv");
    let csv2 = dir.join("b.csv");
    let cfg = write_config(&dir, "trigger.kind = square, sine\nrepeats = 2\n");

    let run = |out: &Path, jobs: &str| {
        let status = bin()
            .args(["matrix", "--config"])
            .arg(&cfg)
            .args(["--jobs", jobs, "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    };
    run(&csv1, "1");
    run(&csv2, "2");
    let a = std::fs::read(&csv1).unwrap();
    let b = std::fs::read(&csv2).unwrap();
    assert_eq!(a, b, "parallel matrix output differs from serial");

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_rejects_multi_valued_axes() {
    let dir = temp_dir("multi");
    let cfg = write_config(&dir, "trigger.kind = square, sine\n");
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("single-run"));
    std::fs::remove_dir_all(&dir).ok();
}
