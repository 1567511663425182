//! CLI behavior: flags, exit codes, file outputs, and the gen -> track ->
//! eval -> train pipeline on a tiny configuration.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_scantrack")
}

fn run(args: &[&str]) -> (String, String, i32) {
    let out = Command::new(bin()).args(args).output().expect("spawn");
    (
        String::from_utf8_lossy(&out.stdout).to_string(),
        String::from_utf8_lossy(&out.stderr).to_string(),
        out.status.code().unwrap_or(-1),
    )
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("scantrack_cli_{name}"));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn no_args_is_usage_error() {
    let (_, err, code) = run(&[]);
    assert_eq!(code, 2);
    assert!(err.contains("usage"));
}

#[test]
fn unknown_command_is_usage_error() {
    let (_, _, code) = run(&["frobnicate"]);
    assert_eq!(code, 2);
}

#[test]
fn unknown_flag_is_usage_error() {
    let (_, err, code) = run(&["gen", "--bogus", "1"]);
    assert_eq!(code, 2);
    assert!(err.contains("unknown flag"));
}

#[test]
fn help_exits_zero() {
    let (out, _, code) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("commands:"));
    for sub in ["gen", "track", "train", "bench", "eval", "selftest"] {
        let (out, _, code) = run(&[sub, "--help"]);
        assert_eq!(code, 0, "{sub} --help");
        assert!(out.contains("usage"), "{sub} --help output");
    }
}

#[test]
fn missing_video_is_runtime_error() {
    let (_, err, code) = run(&["track", "--video", "/nonexistent_zzz", "--out", "/tmp/x.csv"]);
    assert_eq!(code, 1);
    assert!(err.contains("error"));
}

#[test]
fn eval_identical_files_is_perfect() {
    let dir = scratch("eval");
    let gt = dir.join("gt.csv");
    std::fs::write(&gt, "0,10.0,10.0,30.0,30.0\n1,12.0,10.0,32.0,30.0\n").unwrap();
    let (out, _, code) = run(&["eval", "--pred", gt.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert_eq!(code, 0);
    let line = out.trim();
    assert!(line.starts_with("PR="), "{line}");
    let pr: f64 = line.split_whitespace().next().unwrap()[3..].parse().unwrap();
    let sr: f64 = line.split_whitespace().nth(1).unwrap()[3..].parse().unwrap();
    assert_eq!(pr, 1.0);
    assert_eq!(sr, 1.0);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn eval_mismatched_lengths_fails() {
    let dir = scratch("eval_mismatch");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    std::fs::write(&a, "0,0,0,1,1\n1,0,0,1,1\n").unwrap();
    std::fs::write(&b, "0,0,0,1,1\n").unwrap();
    let (_, _, code) = run(&["eval", "--pred", a.to_str().unwrap(), "--gt", b.to_str().unwrap()]);
    assert_eq!(code, 1);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gen_track_eval_pipeline() {
    let dir = scratch("pipeline");
    let vdir = dir.join("video");
    let (_, _, code) = run(&[
        "gen", "--out", vdir.to_str().unwrap(), "--seed", "9", "--len", "8",
        "--profile", "linear", "--size", "160",
    ]);
    assert_eq!(code, 0);
    assert!(vdir.join("manifest.txt").exists());
    assert!(vdir.join("gt.csv").exists());
    assert!(vdir.join("frames/rgb_00000.raw").exists());

    let pred = dir.join("pred.csv");
    let (_, _, code) = run(&["track", "--video", vdir.to_str().unwrap(), "--out", pred.to_str().unwrap()]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&pred).unwrap();
    assert_eq!(text.lines().count(), 8);

    let (out, _, code) = run(&["eval", "--pred", pred.to_str().unwrap(), "--gt", vdir.join("gt.csv").to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(out.contains("PR=") && out.contains("SR="));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn prompts_flag_cannot_exceed_capacity() {
    let dir = scratch("capacity");
    let vdir = dir.join("video");
    run(&["gen", "--out", vdir.to_str().unwrap(), "--seed", "1", "--len", "4", "--profile", "linear", "--size", "160"]);
    let (_, _, code) = run(&[
        "track", "--video", vdir.to_str().unwrap(), "--out", dir.join("p.csv").to_str().unwrap(),
        "--prompts", "99",
    ]);
    assert_eq!(code, 2);
    std::fs::remove_dir_all(&dir).ok();
}

fn tiny_config_text() -> &'static str {
    "d_model=8\nn_state=2\nlayers=1\npatch_size=8\ntemplate_size=16\nsearch_size=32\n\
     head_hidden=8\nnbins=50\ntemplate_count=2\nprompt_len=2\nmax_interval=8\n\
     frame_size=96\nvideo_len=12\ntrain_videos=2\ndistractors=1\nbatch_size=1\n\
     steps_stage1=4\nsteps_stage2=3\nlr_stage1=0.01\nlr_stage2=0.001\nsmooth_window=2\n"
}

#[test]
fn train_both_stages_and_track_with_checkpoint() {
    let dir = scratch("train");
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, tiny_config_text()).unwrap();

    let ck1 = dir.join("stage1.ckpt");
    let loss1 = dir.join("loss1.csv");
    let (out, err, code) = run(&[
        "train", "--stage", "1", "--config", cfg.to_str().unwrap(),
        "--out", ck1.to_str().unwrap(), "--loss-out", loss1.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stage1 stderr: {err}");
    assert!(out.contains("stage 1"));
    assert!(ck1.exists());
    let loss_text = std::fs::read_to_string(&loss1).unwrap();
    assert_eq!(loss_text.lines().count(), 1 + 4); // header + steps

    let ck2 = dir.join("stage2.ckpt");
    let (_, err, code) = run(&[
        "train", "--stage", "2", "--config", cfg.to_str().unwrap(),
        "--init", ck1.to_str().unwrap(), "--out", ck2.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "stage2 stderr: {err}");
    assert!(ck2.exists());

    // stage 2 without --init is a usage error
    let (_, _, code) = run(&[
        "train", "--stage", "2", "--config", cfg.to_str().unwrap(),
        "--out", dir.join("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);

    // track with the trained checkpoint
    let vdir = dir.join("video");
    run(&["gen", "--out", vdir.to_str().unwrap(), "--seed", "4", "--len", "6", "--profile", "linear", "--size", "96"]);
    let pred = dir.join("pred.csv");
    let (_, err, code) = run(&[
        "track", "--video", vdir.to_str().unwrap(), "--out", pred.to_str().unwrap(),
        "--ckpt", ck2.to_str().unwrap(), "--config", cfg.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "track stderr: {err}");
    assert!(pred.exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_is_byte_deterministic() {
    let dir = scratch("train_det");
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, tiny_config_text()).unwrap();
    let ck_a = dir.join("a.ckpt");
    let ck_b = dir.join("b.ckpt");
    let loss_a = dir.join("a.csv");
    let loss_b = dir.join("b.csv");
    for (ck, loss) in [(&ck_a, &loss_a), (&ck_b, &loss_b)] {
        let (_, err, code) = run(&[
            "train", "--stage", "1", "--config", cfg.to_str().unwrap(),
            "--out", ck.to_str().unwrap(), "--loss-out", loss.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "{err}");
    }
    assert_eq!(std::fs::read(&ck_a).unwrap(), std::fs::read(&ck_b).unwrap());
    assert_eq!(std::fs::read(&loss_a).unwrap(), std::fs::read(&loss_b).unwrap());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn bench_rejects_bad_repeats() {
    let (_, _, code) = run(&["bench", "--out", "/tmp/zzz_bench.csv", "--lengths", "64,128", "--repeats", "3", "--model-only"]);
    assert_eq!(code, 1); // library contract error surfaces as runtime failure
}

#[test]
fn selftest_exits_zero() {
    let (out, _, code) = run(&["selftest"]);
    assert_eq!(code, 0);
    assert!(out.contains("all suites passed"));
}
