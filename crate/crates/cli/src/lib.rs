//! Command-line entry point. Subcommands: `selftest`, `gen`, `track`,
//! `train`, `bench`, `eval`. Exit codes: 0 success, 1 runtime failure,
//! 2 usage error.

use std::path::{Path, PathBuf};

use scantrack_core::bench::{emit_records_to_path, loglog_slope, run_scaling_benchmark, KernelKind};
use scantrack_core::config::RunConfig;
use scantrack_core::metrics::{compute_metrics, read_box_csv, write_track_csv};
use scantrack_core::model::Model;
use scantrack_core::selftest::run_selftest;
use scantrack_core::synthetic::{
    generate_synthetic_video, read_video_manifest, write_video_dir, MotionProfile, SyntheticSpec,
};
use scantrack_core::tracker::{init_state, track_step, ModelPredictor, TrackerConfig};
use scantrack_core::train::{run_stage, smoothed_ends, training_videos};
use scantrack_core::Box2;

const USAGE: &str = "\
usage: scantrack <command> [flags]

commands:
  selftest                                run the invariant suites
  gen    --out DIR --seed N --len N --profile {linear|sinusoidal|occluded}
         [--size N] [--distractors N]     generate a synthetic RGB-T video
  track  --video DIR --out FILE [--ckpt FILE] [--config FILE] [--prompts N]
                                          track a directory-of-frames video
  train  --stage {1|2} --out CKPT [--config FILE] [--init CKPT]
         [--loss-out FILE]                desk-scale training smoke run
  bench  --out FILE [--lengths L,..] [--dim N] [--state N] [--repeats N]
         [--seed N] [--model-only]        scan vs attention scaling benchmark
  eval   --pred FILE --gt FILE            PR/SR metrics for box CSVs

run `scantrack <command> --help` for the command's flags";

struct Flags {
    pairs: Vec<(String, String)>,
    help: bool,
}

fn parse_flags(args: &[String], known: &[&str]) -> Result<Flags, String> {
    let mut pairs = Vec::new();
    let mut help = false;
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        if a == "--help" || a == "-h" {
            help = true;
            i += 1;
            continue;
        }
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| format!("expected a --flag, got {a}"))?;
        if !known.contains(&key) {
            return Err(format!("unknown flag --{key}"));
        }
        // boolean flags take no value
        if key == "model-only" {
            pairs.push((key.to_string(), "true".to_string()));
            i += 1;
            continue;
        }
        let value = args
            .get(i + 1)
            .ok_or_else(|| format!("--{key} needs a value"))?;
        pairs.push((key.to_string(), value.clone()));
        i += 2;
    }
    Ok(Flags { pairs, help })
}

impl Flags {
    fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn require(&self, key: &str) -> Result<&str, String> {
        self.get(key).ok_or_else(|| format!("--{key} is required"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, String>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            Some(v) => v.parse::<T>().map_err(|e| format!("--{key}: {e}")),
            None => Ok(default),
        }
    }
}

fn load_config(flags: &Flags) -> Result<RunConfig, String> {
    match flags.get("config") {
        Some(path) => RunConfig::load(Path::new(path)).map_err(|e| e.to_string()),
        None => Ok(RunConfig::default()),
    }
}

pub fn run_cli(args: &[String]) -> i32 {
    let Some(cmd) = args.first() else {
        eprintln!("{USAGE}");
        return 2;
    };
    if cmd == "--help" || cmd == "-h" || cmd == "help" {
        println!("{USAGE}");
        return 0;
    }
    let rest = &args[1..];
    let outcome = match cmd.as_str() {
        "selftest" => cmd_selftest(rest),
        "gen" => cmd_gen(rest),
        "track" => cmd_track(rest),
        "train" => cmd_train(rest),
        "bench" => cmd_bench(rest),
        "eval" => cmd_eval(rest),
        other => {
            eprintln!("unknown command: {other}\n{USAGE}");
            return 2;
        }
    };
    match outcome {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("{msg}\n{USAGE}");
            2
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(String),
}

fn usage_err<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Usage(msg.into()))
}

fn rt<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

fn cmd_selftest(args: &[String]) -> Result<i32, CliError> {
    let flags = parse_flags(args, &[]).map_err(CliError::Usage)?;
    if flags.help {
        println!("usage: scantrack selftest");
        return Ok(0);
    }
    let mut out = std::io::stdout();
    let ok = run_selftest(&mut out).map_err(rt)?;
    Ok(if ok { 0 } else { 1 })
}

fn cmd_gen(args: &[String]) -> Result<i32, CliError> {
    let flags = parse_flags(args, &["out", "seed", "len", "profile", "size", "distractors"])
        .map_err(CliError::Usage)?;
    if flags.help {
        println!(
            "usage: scantrack gen --out DIR --seed N --len N \
             --profile {{linear|sinusoidal|occluded}} [--size N] [--distractors N]"
        );
        return Ok(0);
    }
    let out = PathBuf::from(flags.require("out").map_err(CliError::Usage)?);
    let seed: u64 = flags.parse("seed", 0).map_err(CliError::Usage)?;
    let len: usize = flags.parse("len", 64).map_err(CliError::Usage)?;
    let profile: MotionProfile = flags
        .require("profile")
        .map_err(CliError::Usage)?
        .parse()
        .map_err(CliError::Usage)?;
    let mut spec = SyntheticSpec::new(seed, len, profile);
    spec.frame_size = flags.parse("size", spec.frame_size).map_err(CliError::Usage)?;
    spec.distractors = flags
        .parse("distractors", spec.distractors)
        .map_err(CliError::Usage)?;
    let video = generate_synthetic_video(&spec).map_err(rt)?;
    write_video_dir(&video, &out).map_err(rt)?;
    println!(
        "gen: wrote {} frames ({}x{}, {}) to {}",
        video.len(),
        spec.frame_size,
        spec.frame_size,
        profile,
        out.display()
    );
    Ok(0)
}

fn cmd_track(args: &[String]) -> Result<i32, CliError> {
    let flags = parse_flags(args, &["video", "out", "ckpt", "config", "prompts"])
        .map_err(CliError::Usage)?;
    if flags.help {
        println!(
            "usage: scantrack track --video DIR --out FILE [--ckpt FILE] \
             [--config FILE] [--prompts N]"
        );
        return Ok(0);
    }
    let video_dir = PathBuf::from(flags.require("video").map_err(CliError::Usage)?);
    let out_path = PathBuf::from(flags.require("out").map_err(CliError::Usage)?);
    let cfg = load_config(&flags).map_err(CliError::Usage)?;

    let model = match flags.get("ckpt") {
        Some(p) => Model::load(Path::new(p)).map_err(rt)?,
        None => Model::init(cfg.seed, cfg.model_dims()).map_err(rt)?,
    };
    let prompt_len: usize = flags.parse("prompts", cfg.prompt_len).map_err(CliError::Usage)?;
    if prompt_len > model.dims.prompt_capacity {
        return usage_err(format!(
            "--prompts {prompt_len} exceeds the model's prompt capacity {}",
            model.dims.prompt_capacity
        ));
    }

    let manifest = read_video_manifest(&video_dir).map_err(rt)?;
    if manifest.frames.is_empty() {
        return Err(CliError::Runtime("video has no frames".into()));
    }
    let mut tcfg = TrackerConfig::from_model(&model, cfg.template_count, prompt_len);
    tcfg.mode = cfg.concat_mode;
    tcfg.order = cfg.scan_order;
    let predictor = ModelPredictor {
        model: &model,
        mode: tcfg.mode,
        order: tcfg.order,
        prompts_enabled: prompt_len > 0,
    };

    let (rgb0, tir0) = manifest.load_frame(0).map_err(rt)?;
    let mut state = init_state(&rgb0, &tir0, &manifest.init_box, &tcfg).map_err(rt)?;
    let mut rows: Vec<(u64, Box2, f64)> = vec![(0, manifest.init_box, 1.0)];
    for i in 1..manifest.frames.len() {
        let (rgb, tir) = manifest.load_frame(i).map_err(rt)?;
        let r = track_step(&mut state, &predictor, &rgb, &tir, &tcfg).map_err(rt)?;
        rows.push((r.frame_index, r.box_abs, r.confidence));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(&out_path).map_err(rt)?);
    write_track_csv(&mut f, &rows).map_err(rt)?;
    use std::io::Write;
    f.flush().map_err(rt)?;
    println!("track: {} frames -> {}", rows.len(), out_path.display());
    Ok(0)
}

fn cmd_train(args: &[String]) -> Result<i32, CliError> {
    let flags = parse_flags(args, &["stage", "out", "config", "init", "loss-out"])
        .map_err(CliError::Usage)?;
    if flags.help {
        println!(
            "usage: scantrack train --stage {{1|2}} --out CKPT [--config FILE] \
             [--init CKPT] [--loss-out FILE]"
        );
        return Ok(0);
    }
    let stage: usize = flags
        .require("stage")
        .map_err(CliError::Usage)?
        .parse()
        .map_err(|e| CliError::Usage(format!("--stage: {e}")))?;
    if stage != 1 && stage != 2 {
        return usage_err("--stage must be 1 or 2");
    }
    let out_path = PathBuf::from(flags.require("out").map_err(CliError::Usage)?);
    let cfg = load_config(&flags).map_err(CliError::Usage)?;
    let videos = training_videos(&cfg).map_err(rt)?;

    let mut model = if stage == 2 {
        let init = flags
            .get("init")
            .ok_or_else(|| CliError::Usage("--init CKPT is required for stage 2".into()))?;
        Model::load(Path::new(init)).map_err(rt)?
    } else {
        Model::init(cfg.seed, cfg.model_dims()).map_err(rt)?
    };

    let (steps, lr) = if stage == 1 {
        (cfg.steps_stage1, cfg.lr_stage1)
    } else {
        (cfg.steps_stage2, cfg.lr_stage2)
    };
    let mut rng = scantrack_core::Rng::new(cfg.seed).fork(if stage == 1 { 0xF1 } else { 0xF2 });
    let result = run_stage(&mut model, &videos, &cfg, stage == 2, steps, lr, &mut rng).map_err(rt)?;
    model.save(&out_path).map_err(rt)?;

    if let Some(loss_path) = flags.get("loss-out") {
        let mut text = String::from("step,total\n");
        for (i, l) in result.losses.iter().enumerate() {
            text.push_str(&format!("{i},{l:.9}\n"));
        }
        std::fs::write(loss_path, text).map_err(rt)?;
    }
    let (first, last) = smoothed_ends(&result.losses, cfg.smooth_window);
    println!(
        "train: stage {stage}, {} steps, smoothed loss {:.6} -> {:.6}, checkpoint {}",
        result.losses.len(),
        first,
        last,
        out_path.display()
    );
    Ok(0)
}

fn cmd_bench(args: &[String]) -> Result<i32, CliError> {
    let flags = parse_flags(
        args,
        &["out", "lengths", "dim", "state", "repeats", "seed", "model-only"],
    )
    .map_err(CliError::Usage)?;
    if flags.help {
        println!(
            "usage: scantrack bench --out FILE [--lengths L1,L2,..] [--dim N] \
             [--state N] [--repeats N] [--seed N] [--model-only]"
        );
        return Ok(0);
    }
    let out = PathBuf::from(flags.require("out").map_err(CliError::Usage)?);
    let lengths: Vec<usize> = match flags.get("lengths") {
        Some(spec) => spec
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(format!("--lengths: {e}")))?,
        None => vec![4096, 8192, 16384, 32768],
    };
    let d: usize = flags.parse("dim", 64).map_err(CliError::Usage)?;
    let n: usize = flags.parse("state", 16).map_err(CliError::Usage)?;
    let repeats: usize = flags.parse("repeats", 5).map_err(CliError::Usage)?;
    let seed: u64 = flags.parse("seed", 0).map_err(CliError::Usage)?;
    let timing = flags.get("model-only").is_none();

    let records = run_scaling_benchmark(&lengths, d, n, repeats, seed, timing).map_err(rt)?;
    emit_records_to_path(&records, &out).map_err(rt)?;
    if timing && lengths.len() >= 2 {
        for kind in [KernelKind::Scan, KernelKind::Attention] {
            let pts: Vec<(usize, u64)> = records
                .iter()
                .filter(|r| r.kernel == kind && !r.truncated)
                .map(|r| (r.l, r.wall_ns))
                .collect();
            if pts.len() >= 2 {
                println!("bench: {} log-log slope {:.3}", kind.as_str(), loglog_slope(&pts));
            }
        }
    }
    println!("bench: {} records -> {}", records.len(), out.display());
    Ok(0)
}

fn cmd_eval(args: &[String]) -> Result<i32, CliError> {
    let flags = parse_flags(args, &["pred", "gt"]).map_err(CliError::Usage)?;
    if flags.help {
        println!("usage: scantrack eval --pred FILE --gt FILE");
        return Ok(0);
    }
    let pred_path = flags.require("pred").map_err(CliError::Usage)?;
    let gt_path = flags.require("gt").map_err(CliError::Usage)?;
    let pred_text = std::fs::read_to_string(pred_path).map_err(rt)?;
    let gt_text = std::fs::read_to_string(gt_path).map_err(rt)?;
    let pred: Vec<Box2> = read_box_csv(&pred_text)
        .map_err(rt)?
        .into_iter()
        .map(|(_, b, _)| b)
        .collect();
    let gt: Vec<Box2> = read_box_csv(&gt_text)
        .map_err(rt)?
        .into_iter()
        .map(|(_, b, _)| b)
        .collect();
    let report = compute_metrics(&pred, &gt).map_err(rt)?;
    println!("PR={:.6} SR={:.6}", report.pr, report.sr);
    Ok(0)
}
