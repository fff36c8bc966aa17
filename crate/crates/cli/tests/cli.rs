use std::path::Path;
use std::process::{Command, Output};

fn avsr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsr")).args(args).current_dir(cwd).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.conf");
    let body = format!(
        "data_dir = {d}/data\nout_dir = {d}/runs\nn_classes = 2\ntrain_per_class = 2\nval_per_class = 1\ntest_per_class = 1\nimage_size = 16\ncells = 4\nfusion_cells = 4\nfixed_epochs = 1\ndelay = 1\nmax_epochs = 2\n{extra}",
        d = dir.display()
    );
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "learning_rate = 0.1\n");
    let out = avsr(&["gen-data", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("learning_rate") && err.contains("line 13"), "{err}");
}

#[test]
fn bad_flags_and_targets_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(avsr(&["train", "--bogus"], dir.path()).status.code(), Some(1));
    let cfg = write_config(dir.path(), "");
    let out = avsr(&["train", "--config", &cfg, "--target", "lips"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("lips"));
    assert_eq!(avsr(&["train", "--config", &cfg], dir.path()).status.code(), Some(1));
}

#[test]
fn av_without_stream_checkpoints_names_them() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = avsr(&["train", "--config", &cfg, "--target", "av"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("audio.ckpt") && err.contains("video.ckpt"), "{err}");
}

#[test]
fn missing_config_file_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = avsr(&["gen-data", "--config", "nope.conf"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("nope.conf"));
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = avsr(&["gen-data", "--config", &cfg, "--seed", "5"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.starts_with("# effective config\n"));
    // The echo is itself a valid config naming every key.
    let echo: String = stdout.lines().skip(1).take_while(|l| l.contains(" = ")).map(|l| format!("{l}\n")).collect();
    assert!(echo.contains("seed = 5\n") && echo.contains("mfcc_checkpoint = "));
    assert_eq!(echo.lines().count(), avsr::config::KEYS.len());
    avsr::config::RunConfig::parse(&echo).unwrap();
    assert!(dir.path().join("data/manifest.csv").is_file());

    let out = avsr(&["train", "--config", &cfg, "--seed", "5", "--target", "mfcc"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("runs/mfcc_metrics.csv")).unwrap();
    assert!(metrics.starts_with("stage,epoch,train_loss,train_cr,val_cr,wall_seconds\n"));

    let out = avsr(&["eval", "--config", &cfg, "--seed", "5", "--target", "mfcc", "--snr", "-5"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let preds = std::fs::read_to_string(dir.path().join("runs/predictions_mfcc_test_-5.csv")).unwrap();
    assert!(preds.starts_with("id,true,predicted,confidence\n"));
    assert_eq!(preds.lines().count(), 3);

    // A seed other than the one trained with is rejected on resume.
    let ck = dir.path().join("runs/mfcc.ckpt").display().to_string();
    let out = avsr(&["train", "--config", &cfg, "--seed", "6", "--target", "mfcc", "--checkpoint", &ck], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = avsr(&["sweep-snr", "--config", &cfg, "--seed", "5"], dir.path());
    assert_eq!(out.status.code(), Some(1), "sweep needs all four models without --partial");
    let out = avsr(&["sweep-snr", "--config", &cfg, "--seed", "5", "--partial"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("runs/sweep.csv")).unwrap();
    assert!(sweep.starts_with("snr_db,model,cr\n"));
    assert_eq!(sweep.lines().count(), 1 + 7);
}

#[test]
fn corrupt_checkpoint_exits_1_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    assert_eq!(avsr(&["gen-data", "--config", &cfg], dir.path()).status.code(), Some(0));
    std::fs::create_dir_all(dir.path().join("runs")).unwrap();
    std::fs::write(dir.path().join("runs/audio.ckpt"), b"not a checkpoint").unwrap();
    let out = avsr(&["eval", "--config", &cfg, "--target", "audio"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("offset"), "{}", text(&out.stderr));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, b"").unwrap();
    let cfg = write_config(dir.path(), "");
    let out = avsr(&["gen-data", "--config", &cfg, "--out", &blocker.join("data").display().to_string()], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
}
