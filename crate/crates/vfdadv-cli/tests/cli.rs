//! End-to-end subcommand tests driving the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vfdadv"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(
        &path,
        "[dataset]\nper_class = 22\n[train]\nepochs = 2\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn lambda_zero_train_matches_plain_baseline_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let trades = tmp.path().join("trades");
    let vfd = tmp.path().join("vfd");
    assert_ok(&run(&[
        "train", "--config", &cfg, "--method", "trades", "--lambda", "0", "--seed", "1",
        "--out", trades.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "train", "--config", &cfg, "--method", "trades+vfd", "--lambda", "0", "--seed", "1",
        "--out", vfd.to_str().unwrap(),
    ]));
    let a = fs::read(trades.join("checkpoint.bin")).unwrap();
    let b = fs::read(vfd.join("checkpoint.bin")).unwrap();
    assert_eq!(a, b, "lambda = 0 must reduce to the plain method bit-exactly");
}

#[test]
fn attack_echoes_epsilon_in_both_forms() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let model_dir = tmp.path().join("model");
    assert_ok(&run(&[
        "train-vanilla", "--config", &cfg, "--out", model_dir.to_str().unwrap(),
    ]));
    let model = model_dir.join("checkpoint.bin");
    let atk = tmp.path().join("atk");
    let out = run(&[
        "attack", "--config", &cfg, "--model", model.to_str().unwrap(), "--method", "pgd",
        "--eps", "0.031372549", "--steps", "20", "--out", atk.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0.031372549"), "decimal form missing: {stdout}");
    assert!(stdout.contains("8/255"), "fractional form missing: {stdout}");
    assert!(atk.join("adversarial.bin").is_file());
    let report = fs::read_to_string(atk.join("attack_report.csv")).unwrap();
    assert!(report.starts_with("defense,threat,attack,epsilon,steps,robust_acc,clean_acc,seed"));
}

#[test]
fn lambda_grid_enumerates_nine_points() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("tiny.toml");
    fs::write(&cfg_path, "[dataset]\nper_class = 8\n[train]\nepochs = 1\n").unwrap();
    let cfg = cfg_path.to_string_lossy();
    let teacher_dir = tmp.path().join("teacher");
    assert_ok(&run(&[
        "train-vanilla", "--config", &cfg, "--out", teacher_dir.to_str().unwrap(),
    ]));
    let sweep_dir = tmp.path().join("sweep");
    assert_ok(&run(&[
        "sweep", "--config", &cfg, "--method", "trades+vfd", "--param", "lambda",
        "--grid", "0:0.04:0.005", "--jobs", "4",
        "--teacher", teacher_dir.join("checkpoint.bin").to_str().unwrap(),
        "--out", sweep_dir.to_str().unwrap(),
    ]));
    let csv = fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "param,value,clean_acc,robust_acc");
    assert_eq!(rows.len(), 10, "9 grid points expected:\n{csv}");
    assert!(rows[1].starts_with("lambda,0,"));
    assert!(rows[9].starts_with("lambda,0.04,"));
    for value in ["0", "0.005", "0.01", "0.04"] {
        assert!(sweep_dir.join(format!("ckpt-lambda-{value}.bin")).is_file());
    }
}

#[test]
fn failure_categories_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let out_arg = tmp.path().join("o");
    let out = out_arg.to_str().unwrap();

    // Unknown flag: usage.
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    // Missing --out with no environment default: usage.
    let no_out = bin()
        .args(["train-vanilla", "--config", &cfg])
        .env_remove("VFDADV_OUT")
        .output()
        .unwrap();
    assert_eq!(no_out.status.code(), Some(2));
    // Unreadable config file: config.
    assert_eq!(
        run(&["train", "--config", "missing.toml", "--out", out]).status.code(),
        Some(3)
    );
    // Plain method with a distillation weight: config.
    let out2 = run(&[
        "train", "--config", &cfg, "--method", "trades", "--lambda", "0.1", "--out", out,
    ]);
    assert_eq!(out2.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out2.stderr);
    assert!(stderr.starts_with("error[config]: "), "got: {stderr}");
    assert_eq!(stderr.lines().count(), 1);
    // Damaged checkpoint: data.
    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, b"garbage").unwrap();
    assert_eq!(
        run(&["eval", "--config", &cfg, "--model", bad.to_str().unwrap(), "--out", out])
            .status
            .code(),
        Some(4)
    );
}

#[test]
fn eval_regenerates_byte_identically_from_its_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let model_dir = tmp.path().join("model");
    assert_ok(&run(&[
        "train", "--config", &cfg, "--method", "trades", "--out",
        model_dir.to_str().unwrap(),
    ]));
    let model = model_dir.join("checkpoint.bin");
    let first = tmp.path().join("eval1");
    assert_ok(&run(&[
        "eval", "--config", &cfg, "--model", model.to_str().unwrap(), "--out",
        first.to_str().unwrap(),
    ]));
    // Rerun purely from the echoed snapshot: no preset, no extra flags.
    let second = tmp.path().join("eval2");
    assert_ok(&run(&[
        "eval", "--config", first.join("config.toml").to_str().unwrap(), "--out",
        second.to_str().unwrap(),
    ]));
    for file in ["config.toml", "eval.csv", "eval.txt"] {
        assert_eq!(
            fs::read(first.join(file)).unwrap(),
            fs::read(second.join(file)).unwrap(),
            "{file} differs between original and regenerated run"
        );
    }
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let root = tmp.path().join("runs");
    let out = bin()
        .args(["train-vanilla", "--config", &cfg])
        .env("VFDADV_OUT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("train-vanilla").join("checkpoint.bin").is_file());
    assert!(root.join("train-vanilla").join("config.toml").is_file());
}

#[test]
fn surrogate_eval_reports_both_threat_models() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(tmp.path());
    let victim_dir = tmp.path().join("victim");
    let surrogate_dir = tmp.path().join("surrogate");
    assert_ok(&run(&[
        "train", "--config", &cfg, "--method", "trades", "--seed", "1", "--out",
        victim_dir.to_str().unwrap(),
    ]));
    assert_ok(&run(&[
        "train-vanilla", "--config", &cfg, "--seed", "2", "--out",
        surrogate_dir.to_str().unwrap(),
    ]));
    let ev = tmp.path().join("ev");
    assert_ok(&run(&[
        "eval", "--config", &cfg,
        "--model", victim_dir.join("checkpoint.bin").to_str().unwrap(),
        "--model-id", "trades",
        "--surrogate", surrogate_dir.join("checkpoint.bin").to_str().unwrap(),
        "--out", ev.to_str().unwrap(),
    ]));
    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert!(csv.contains("trades,white-box,pgd,"));
    assert!(csv.contains("trades,black-box:checkpoint,pgd,"));
    let table = fs::read_to_string(ev.join("eval.txt")).unwrap();
    assert!(table.contains("white-box pgd"));
    assert!(table.contains("black-box:checkpoint pgd"));
    assert!(table.lines().count() >= 2);
}
