//! End-to-end checks of the binary: config strictness, output determinism,
//! override precedence, abort behavior, and the gradcheck/bench commands.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_diffmpc"))
}

/// A deliberately tiny lqr-imitate setup so each run takes milliseconds.
fn tiny_lqr_config(lr: f64) -> serde_json::Value {
    serde_json::json!({
        "experiment": "lqr-imitate",
        "env": {"kind": "lqr", "n_state": 2, "n_ctrl": 1, "horizon": 3, "ctrl_bound": 1.0},
        "train": {
            "method": "lqr.dx",
            "optimizer": {"name": "rmsprop", "lr": lr, "decay": 0.5},
            "batch_size": 4,
            "epochs": 2
        },
        "dataset": {"train_size": 8, "val_size": 4, "test_size": 4},
        "trials": 1,
        "seed": 5
    })
}

fn write_config(dir: &Path, value: &serde_json::Value) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn run_into(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("run")
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("binary runs")
}

#[test]
fn equal_seeds_give_byte_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_lqr_config(0.01));
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let ran_a = run_into(&config, &out_a, &[]);
    let ran_b = run_into(&config, &out_b, &[]);
    assert!(ran_a.status.success(), "{}", String::from_utf8_lossy(&ran_a.stderr));
    assert!(ran_b.status.success());

    let curves_a = std::fs::read(out_a.join("curves_trial0.csv")).unwrap();
    let curves_b = std::fs::read(out_b.join("curves_trial0.csv")).unwrap();
    assert_eq!(curves_a, curves_b);
    // three header-plus-data lines: epochs 0, 1, 2
    assert_eq!(curves_a.iter().filter(|&&b| b == b'\n').count(), 4);

    // summaries agree on everything except wall-clock time
    let read = |p: &Path| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
    };
    let mut sum_a = read(&out_a.join("summary.json"));
    let mut sum_b = read(&out_b.join("summary.json"));
    sum_a["wall_clock_seconds"] = 0.0.into();
    sum_b["wall_clock_seconds"] = 0.0.into();
    assert_eq!(sum_a, sum_b);
    assert_eq!(sum_a["schema_version"], 1);
    assert_eq!(sum_a["trials"][0]["method"], "lqr.dx");
}

#[test]
fn unknown_config_key_fails_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_lqr_config(0.01);
    cfg["paralellism"] = 4.into();
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    let ran = run_into(&config, &out, &[]);
    assert!(!ran.status.success());
    let stderr = String::from_utf8_lossy(&ran.stderr);
    assert!(stderr.contains("unknown field"), "stderr: {stderr}");
    assert!(!out.exists(), "nothing should be written for a rejected config");
}

#[test]
fn seed_flag_overrides_config_and_the_echo_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_lqr_config(0.01));
    let out = dir.path().join("out");
    let ran = run_into(&config, &out, &["--seed", "99"]);
    assert!(ran.status.success(), "{}", String::from_utf8_lossy(&ran.stderr));

    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["seed"], 99);
    assert_eq!(echo["out_dir"], out.to_string_lossy().as_ref());
    assert_eq!(echo["train"]["alternation_period"], 10);

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 99);
}

#[test]
fn env_var_supplies_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &tiny_lqr_config(0.01));
    let out = dir.path().join("from-env");
    let ran = bin()
        .arg("run")
        .arg("--config")
        .arg(&config)
        .env("DIFFMPC_OUT", &out)
        .output()
        .expect("binary runs");
    assert!(ran.status.success(), "{}", String::from_utf8_lossy(&ran.stderr));
    assert!(out.join("summary.json").exists());
}

#[test]
fn a_diverging_run_fails_but_keeps_the_partial_curve() {
    let dir = tempfile::tempdir().unwrap();
    // enormous learning rate: after the first update the learner is junk,
    // so training aborts (all solves skipped, or non-finite parameters)
    let config = write_config(dir.path(), &tiny_lqr_config(1e308));
    let out = dir.path().join("out");
    let ran = run_into(&config, &out, &[]);
    assert!(!ran.status.success());
    let stderr = String::from_utf8_lossy(&ran.stderr);
    assert!(stderr.contains("training error"), "stderr: {stderr}");

    let curves = std::fs::read_to_string(out.join("curves_trial0.csv")).unwrap();
    let mut lines = curves.lines();
    assert_eq!(lines.next().unwrap(), "epoch,train_loss,val_loss,test_loss,model_loss");
    // the epoch-0 evaluation at the initial parameters survives
    assert!(lines.next().unwrap().starts_with("0,"));
    assert!(!out.join("summary.json").exists());
}

#[test]
fn missing_required_section_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_lqr_config(0.01);
    cfg.as_object_mut().unwrap().remove("train");
    let config = write_config(dir.path(), &cfg);
    let ran = run_into(&config, &dir.path().join("out"), &[]);
    assert!(!ran.status.success());
    assert!(String::from_utf8_lossy(&ran.stderr).contains("requires"));
}

#[test]
fn gradcheck_lqr_passes_and_exits_zero() {
    let ran = bin().args(["gradcheck", "--env", "lqr"]).output().unwrap();
    let stdout = String::from_utf8_lossy(&ran.stdout);
    assert!(ran.status.success(), "stdout: {stdout}");
    assert!(stdout.contains("pass"), "stdout: {stdout}");
}

#[test]
fn bench_writes_the_fixed_csv_header() {
    let dir = tempfile::tempdir().unwrap();
    let ran = bin()
        .args(["bench", "--caps", "3,6", "--trials", "2", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(ran.status.success(), "{}", String::from_utf8_lossy(&ran.stderr));
    let text = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "env,n_state,n_ctrl,horizon,cap,iters_used,\
         forward_mean_s,forward_std_s,backward_mean_s,backward_std_s"
    );
    assert_eq!(lines.count(), 2);
}
