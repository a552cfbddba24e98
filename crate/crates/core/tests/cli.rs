use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lora-mini");

const TOY: &str = r#"{
    "seed": 3,
    "task": {"kind": "toy_classification", "d_model": 6, "seq_len": 3, "n_classes": 2, "n_samples": 16, "eval_samples": 8},
    "model": {"d_model": 6, "d_ff": 8, "n_blocks": 1, "seq_len": 3, "n_outputs": 2, "task_kind": "classification"},
    "adapter": {"method": "lora_mini", "r": 2, "a": 3, "b": 3},
    "train": {"epochs": 4, "batch_size": 8}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("LMINI_SEED")
        .output()
        .expect("spawn lora-mini")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.json");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn count_prints_dense_only_roberta_cell() {
    let o = run(&[
        "count",
        "--fixture",
        "roberta",
        "--method",
        "lora_mini",
        "--target",
        "dense_only",
        "-r",
        "8",
        "-a",
        "16",
        "-b",
        "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("11010"), "{out}");
    assert!(out.contains("0.009%"), "{out}");
}

#[test]
fn count_json_is_parseable() {
    let o = run(&[
        "count",
        "--fixture",
        "roberta",
        "--method",
        "lora_mini",
        "-r",
        "32",
        "-a",
        "64",
        "-b",
        "64",
        "--json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let text = v.to_string();
    assert!(text.contains("300546"), "{text}");
}

#[test]
fn gradcheck_passes() {
    let o = run(&["gradcheck", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
}

#[test]
fn fixtures_verify_reports_the_erratum() {
    let o = run(&["fixtures-verify"]);
    assert_eq!(o.status.code(), Some(2));
    let out = stdout(&o);
    assert_eq!(
        out.lines()
            .filter(|l| l.starts_with("MISMATCH cell"))
            .count(),
        1,
        "{out}"
    );
    assert!(out.contains("BERT-STSB"), "{out}");
    assert!(stderr(&o).starts_with("error kind=numeric"));
}

#[test]
fn train_eval_merge_flow() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let out_dir = dir.path().join("out");
    let out = out_dir.to_str().unwrap();

    let o = run(&["train", "--config", &cfg, "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["effective_config.json", "report.json", "adapters.ckpt"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 4);

    let ckpt = out_dir.join("adapters.ckpt");
    let o = run(&[
        "eval",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(metrics.get("eval_accuracy").is_some(), "{metrics}");

    let merged = dir.path().join("merged.bin");
    let o = run(&[
        "merge",
        "--config",
        &cfg,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(merged.exists());
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TOY);
    let report = |seed: Option<&str>, name: &str| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(BIN);
        cmd.args(["train", "--config", &cfg, "--out", out.to_str().unwrap()])
            .env_remove("LMINI_SEED");
        if let Some(s) = seed {
            cmd.env("LMINI_SEED", s);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out.join("effective_config.json")).unwrap()
    };
    let base = report(None, "a");
    assert_eq!(base, report(Some("3"), "b"));
    assert_ne!(base, report(Some("4"), "c"));

    let o = Command::new(BIN)
        .args([
            "train",
            "--config",
            &cfg,
            "--out",
            dir.path().join("d").to_str().unwrap(),
        ])
        .env("LMINI_SEED", "minus-one")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn invalid_inputs_exit_with_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = run(&[
        "train",
        "--config",
        missing.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).starts_with("error kind=validation msg="),
        "{}",
        stderr(&o)
    );

    let cfg = write_config(
        dir.path(),
        r#"{"task": {"kind": "lowrank_teacher", "d": 4, "k": 4}, "train": {"epochs": 1, "batch_size": 1}}"#,
    );
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["count", "--fixture", "gpt-9", "--method", "lora", "-r", "8"]);
    assert_eq!(o.status.code(), Some(1));

    let o = run(&["count", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_run_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{
            "task": {"kind": "lowrank_teacher", "d": 8, "k": 8, "r_star": 2, "n_samples": 32},
            "adapter": {"method": "lora", "r": 2},
            "train": {"optimizer": "sgd", "lr": 1e6, "epochs": 50, "batch_size": 32}
        }"#,
    );
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}{}", stdout(&o), stderr(&o));
    assert!(stderr(&o).starts_with("error kind=numeric"));
}
