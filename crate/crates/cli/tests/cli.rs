use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn segbert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segbert"))
        .args(args)
        .env_remove(segbert_cli::DATA_DIR_ENV)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train", "--dataset", "MUTAG", "--epochs", "2", "--patience", "1", "--hidden", "8",
        "--intermediate", "8", "--data-dir",
    ];
    let dir = data_dir();
    args.push(dir.to_str().unwrap());
    args.extend(["--out", out.to_str().unwrap()]);
    args.extend(extra);
    segbert(&args)
}

#[test]
fn inspect_prints_statistics() {
    let out = segbert(&["inspect", "--dataset", "MUTAG", "--data-dir", data_dir().to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("188 graphs, 2 classes, avg 17.9, max 28\n"), "{text}");
}

#[test]
fn missing_dataset_exits_one() {
    let empty = tempfile::tempdir().unwrap();
    let out = segbert(&["inspect", "--dataset", "NCI1", "--data-dir", empty.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("NCI1"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(segbert(&["train", "--strategy", "sideways"]).status.code(), Some(2));
    let out = tempfile::tempdir().unwrap();
    let full = tiny_train(out.path(), &["--strategy", "full-input", "--k", "30"]);
    assert_eq!(full.status.code(), Some(2));
    let bad_lr = tiny_train(out.path(), &["--lr", "-1"]);
    assert_eq!(bad_lr.status.code(), Some(2));
}

#[test]
fn gradcheck_exit_codes() {
    let small = ["gradcheck", "--hidden", "8", "--intermediate", "8", "--layers", "1"];
    assert_eq!(segbert(&small).status.code(), Some(0));
    let mut corrupt = small.to_vec();
    corrupt.extend(["--corrupt-backward", "layer_norm"]);
    let out = segbert(&corrupt);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gradcheck failed for"));
}

#[test]
fn train_writes_reports_and_checkpoints() {
    let out = tempfile::tempdir().unwrap();
    let ckpt = out.path().join("ckpt");
    let run = tiny_train(
        out.path(),
        &["--strategy", "segment-shifting", "--k", "10", "--residual", "raw", "--checkpoint", ckpt.to_str().unwrap()],
    );
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.starts_with("MUTAG segment-shifting k=10 residual=raw: accuracy "), "{stdout}");
    for name in ["config_echo", "summary.csv", "timing.csv", "fold_0.csv", "fold_9.csv"] {
        assert!(out.path().join(name).is_file(), "{name} missing");
    }
    for i in 0..10 {
        assert!(ckpt.join(format!("fold_{i}.bin")).is_file());
    }
    let summary = fs::read_to_string(out.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 13);
    let fold = fs::read_to_string(out.path().join("fold_0.csv")).unwrap();
    assert_eq!(fold.lines().next(), Some("epoch,train_loss,train_acc,val_acc,test_acc"));
}

#[test]
fn config_echo_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    assert!(tiny_train(first.path(), &["--seed", "4", "--no-refit"]).status.success());
    let echo = fs::read_to_string(first.path().join("config_echo")).unwrap();
    assert!(echo.contains("seed = 4\n") && echo.contains("refit = false\n") && echo.contains("k = 25\n"));

    let second = tempfile::tempdir().unwrap();
    let config = second.path().join("run.cfg");
    fs::write(&config, echo.replace(first.path().to_str().unwrap(), second.path().to_str().unwrap())).unwrap();
    let rerun = segbert(&["train", "--config", config.to_str().unwrap()]);
    assert!(rerun.status.success(), "{}", String::from_utf8_lossy(&rerun.stderr));
    assert_eq!(
        fs::read(first.path().join("summary.csv")).unwrap(),
        fs::read(second.path().join("summary.csv")).unwrap()
    );
}
