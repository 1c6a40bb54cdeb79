//! Command-line contract tests: exit codes, artifacts, determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use once_cell::sync::Lazy;
use tempfile::TempDir;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_decoseg")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn decoseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("test.conf");
    let base = "\
image_size=24
c_shared=8
c_private=12
c_f=12
d_proj=8
disc_hidden=8
epochs=1
episodes_per_epoch=4
batch_size=2
pretrain_epochs=1
finetune_epochs=1
finetune_episodes=2
eval_episodes=3
bank_capacity=64
bank_push=8
pixels_per_class=6
";
    fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

/// Shared tiny pretrain checkpoint for downstream command tests.
static PRETRAINED: Lazy<(TempDir, PathBuf, PathBuf)> = Lazy::new(|| {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("out_dir={}\n", dir.path().display()));
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "1",
        "--override",
        "run_name=pre",
    ]);
    assert_eq!(code(&out), 0, "pretrain failed: {out:?}");
    let ckpt = dir.path().join("pre/pretrain.ckpt");
    assert!(ckpt.exists());
    (dir, cfg, ckpt)
});

#[test]
fn check_passes_and_corruption_exits_4() {
    let ok = run(&["check"]);
    assert_eq!(code(&ok), 0);
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.contains("[PASS] grl_gradient_sign"));
    assert!(stdout.contains("[PASS] fusion_per_pixel_oracle"));

    let bad = run(&["check", "--corrupt-grl"]);
    assert_eq!(code(&bad), 4);
    let stdout = String::from_utf8_lossy(&bad.stdout);
    assert!(stdout.contains("[FAIL] grl_gradient_sign"));
}

#[test]
fn config_parse_error_exits_1_with_line() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.conf");
    fs::write(&path, "epochs=1\nmystery_key=4\n").unwrap();
    let out = run(&["check", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "stderr: {err}");
    assert!(err.contains("mystery_key"));
}

#[test]
fn invalid_flag_value_exits_1() {
    let out = run(&["check", "--override", "shots=3"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn missing_checkpoint_exits_2() {
    let (dir, cfg, _) = &*PRETRAINED;
    // finetune without a source checkpoint
    let out = run(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        &format!("out_dir={}", dir.path().display()),
        "--override",
        "run_name=ft-missing",
    ]);
    assert_eq!(code(&out), 2);
    // train pointing at a nonexistent file
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "pretrain_ckpt=/nonexistent/pre.ckpt",
        "--override",
        "run_name=tr-missing",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn eval_on_untrained_model_is_bounded_and_ok() {
    let (dir, cfg, ckpt) = &*PRETRAINED;
    let out = run(&[
        "eval",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "1",
        "--override",
        &format!("source_ckpt={}", ckpt.display()),
        "--override",
        "run_name=ev",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let summary = fs::read_to_string(dir.path().join("ev/summary.json")).unwrap();
    for line in summary.lines().filter(|l| l.contains("miou")) {
        let v: f64 = line
            .split(':')
            .nth(1)
            .unwrap()
            .trim()
            .trim_end_matches(',')
            .parse()
            .unwrap();
        assert!((0.0..=1.0).contains(&v), "mIoU out of range: {line}");
    }
    // per-episode CSV with the documented header
    let csv = fs::read_to_string(dir.path().join("ev/episodes_1shot.csv")).unwrap();
    assert!(csv.starts_with("episode_id,domain_id,class_id,fg_iou,bg_iou"));
    assert!(dir.path().join("ev/episodes_5shot.csv").exists());
    // resolved config written beside outputs
    assert!(dir.path().join("ev/config.resolved").exists());
}

#[test]
fn train_is_byte_deterministic_across_runs() {
    let (dir, cfg, ckpt) = &*PRETRAINED;
    let mut csvs = Vec::new();
    for name in ["tr-a", "tr-b"] {
        let out = run(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--override",
            &format!("pretrain_ckpt={}", ckpt.display()),
            "--override",
            &format!("run_name={name}"),
        ]);
        assert_eq!(code(&out), 0, "{out:?}");
        csvs.push(fs::read(dir.path().join(name).join("train.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1], "identical seeds must produce identical CSV bytes");
}

#[test]
fn lock_file_blocks_concurrent_writers() {
    let (dir, cfg, _) = &*PRETRAINED;
    let run_dir = dir.path().join("locked");
    fs::create_dir_all(&run_dir).unwrap();
    fs::write(run_dir.join("run.lock"), b"").unwrap();
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        "run_name=locked",
    ]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("locked"), "stderr: {err}");
}

#[test]
fn export_then_consume_directory_source() {
    let (dir, cfg, _) = &*PRETRAINED;
    let out = run(&[
        "export-data",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "2",
        "--override",
        "run_name=exp",
        "--override",
        "export_scenes=3",
        "--domains",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{out:?}");
    let data_dir = dir.path().join("exp/data");
    let manifest = data_dir.join("domain1/manifest.txt");
    assert!(manifest.exists());
    let lines = fs::read_to_string(&manifest).unwrap();
    // one line per scene: seed, class_id, image, mask
    for line in lines.lines() {
        assert_eq!(line.split_whitespace().count(), 4);
    }
    // a pretrain run can consume the exported directory as its source
    let out = run(&[
        "pretrain",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "2",
        "--override",
        &format!("data_dir={}", data_dir.display()),
        "--override",
        "run_name=pre-from-dir",
        "--override",
        "episodes_per_epoch=2",
    ]);
    // domain0 was exported alongside the requested targets
    assert_eq!(code(&out), 0, "{out:?}");
}

#[test]
fn nan_abort_exits_3() {
    use decoseg_core::checkpoint;
    let (dir, cfg, ckpt) = &*PRETRAINED;
    // poison the pretrained backbone's head-facing projection
    let mut net = checkpoint::load(ckpt).unwrap();
    let id = net
        .store
        .group_ids(decoseg_core::backbone::GROUP)
        .into_iter()
        .find(|&i| net.store.param(i).name == "base_proj.w")
        .unwrap();
    net.store.value_mut(id)[[0, 0, 0, 0]] = f64::NAN;
    let poisoned = dir.path().join("poisoned.ckpt");
    checkpoint::save(&poisoned, &net).unwrap();

    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--override",
        &format!("pretrain_ckpt={}", poisoned.display()),
        "--override",
        "run_name=tr-nan",
    ]);
    assert_eq!(code(&out), 3, "{out:?}");
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("non-finite"), "stderr: {err}");
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}
