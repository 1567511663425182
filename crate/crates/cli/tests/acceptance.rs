//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measurements (run with `-- --nocapture` to see them). Tests serialize
//! on a shared lock so the timing-sensitive criteria always run alone; the
//! desk-scale training run is shared between the criteria that need it.
//!
//! Run: cargo test -p scantrack-cli --test acceptance -- --nocapture

use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use scantrack_core::assembly::{
    build_sequence, dediscretize, discretize_coordinate, embed_prompts, ConcatMode,
    CoordVocabulary, ScanOrder, TemplateTokens, TokenTag,
};
use scantrack_core::bench::{loglog_slope, run_scaling_benchmark, KernelKind};
use scantrack_core::config::RunConfig;
use scantrack_core::encoder::{encoder_backward, encoder_forward, init_params, EncoderDims};
use scantrack_core::fd::{central_diff, max_rel_err};
use scantrack_core::metrics::compute_metrics;
use scantrack_core::model::Model;
use scantrack_core::num::rel_dev;
use scantrack_core::rng::Rng;
use scantrack_core::ssm::{
    sample_inputs, selective_scan, selective_scan_backward, selective_scan_oracle, ScanInputs,
};
use scantrack_core::synthetic::{generate_synthetic_video, MotionProfile, SyntheticSpec};
use scantrack_core::tensor::Mat;
use scantrack_core::tracker::{select_template_indices, track_synthetic};
use scantrack_core::train::{smoothed_ends, train_smoke, training_videos, run_stage, TrainOutcome};
use scantrack_core::Box2;

static LOCK: Mutex<()> = Mutex::new(());

fn serialize() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn desk_config() -> RunConfig {
    RunConfig::default()
}

fn shared_training() -> &'static TrainOutcome {
    static TRAINED: OnceLock<TrainOutcome> = OnceLock::new();
    TRAINED.get_or_init(|| {
        let cfg = desk_config();
        train_smoke(&cfg).expect("desk-scale training")
    })
}

#[test]
fn c01_scan_correctness() {
    let _g = serialize();
    let t0 = Instant::now();
    let mut rng = Rng::new(1001);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let l = 1 + rng.below(128);
        let d = 1 + rng.below(16);
        let n = 1 + rng.below(8);
        let inputs = sample_inputs(&mut rng, l, d, n, i % 9 == 0);
        let fast = selective_scan(&inputs).unwrap();
        let slow = selective_scan_oracle(&inputs).unwrap();
        for (a, b) in fast.y.iter().zip(&slow.y) {
            worst = worst.max(rel_dev(*a, *b));
        }
        for (a, b) in fast.h_final.iter().zip(&slow.h_final) {
            worst = worst.max(rel_dev(*a, *b));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(worst < 1e-10, "max relative error {worst}");
    assert!(secs < 30.0, "runtime {secs:.1}s exceeds 30s");
    println!("ACCEPTANCE 1 scan-correctness: PASS (1000 instances, max rel err {worst:.2e}, {secs:.1}s)");
}

#[test]
fn c02_gradient_fidelity() {
    let _g = serialize();
    let t0 = Instant::now();
    let mut rng = Rng::new(2002);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let euler = i % 5 == 4;
        let l = 2 + rng.below(6);
        let d = 1 + rng.below(3);
        let n = 1 + rng.below(3);
        let inputs = sample_inputs(&mut rng, l, d, n, euler);
        let wy: Vec<f64> = (0..l * d).map(|_| rng.normal()).collect();
        let wh: Vec<f64> = (0..d * n).map(|_| rng.normal()).collect();
        let grads = selective_scan_backward(&inputs, &wy, &wh).unwrap();
        let loss = |inp: &ScanInputs<f64>| {
            let out = selective_scan(inp).unwrap();
            out.y.iter().zip(&wy).map(|(a, b)| a * b).sum::<f64>()
                + out.h_final.iter().zip(&wh).map(|(a, b)| a * b).sum::<f64>()
        };
        let fields: [(&[f64], &dyn Fn(&mut ScanInputs<f64>) -> &mut Vec<f64>); 6] = [
            (&grads.d_x, &|inp| &mut inp.x),
            (&grads.d_delta, &|inp| &mut inp.delta),
            (&grads.d_a, &|inp| &mut inp.a),
            (&grads.d_b, &|inp| &mut inp.b),
            (&grads.d_c, &|inp| &mut inp.c),
            (&grads.d_h0, &|inp| &mut inp.h0),
        ];
        for (analytic, access) in fields {
            let point: Vec<f64> = {
                let mut tmp = inputs.clone();
                access(&mut tmp).clone()
            };
            let numeric = central_diff(
                |p| {
                    let mut probe = inputs.clone();
                    access(&mut probe).copy_from_slice(p);
                    loss(&probe)
                },
                &point,
                1e-5,
            );
            worst = worst.max(max_rel_err(analytic, &numeric));
        }
    }

    // two-layer encoder input gradient
    let dims = EncoderDims::new(8, 4, 2);
    let params = init_params(71, dims);
    let seq = Mat::random_normal(8, 8, 1.0, &mut rng);
    let w = Mat::random_normal(8, 8, 1.0, &mut rng);
    let (_, caches) = encoder_forward(&seq, &params);
    let mut eg = params.zeros_grads();
    let d_seq = encoder_backward(&params, &caches, &w, &mut eg);
    let numeric = central_diff(
        |p| {
            let (out, _) = encoder_forward(&Mat::from_vec(8, 8, p.to_vec()), &params);
            out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        },
        seq.as_slice(),
        1e-5,
    );
    worst = worst.max(max_rel_err(d_seq.as_slice(), &numeric));

    let secs = t0.elapsed().as_secs_f64();
    assert!(worst < 1e-4, "max gradient relative error {worst}");
    assert!(secs < 120.0, "runtime {secs:.1}s exceeds 2 min");
    println!("ACCEPTANCE 2 gradient-fidelity: PASS (100 scan instances + 2-layer encoder, max rel err {worst:.2e}, {secs:.1}s)");
}

#[test]
fn c03_zoh_semigroup() {
    let _g = serialize();
    let mut rng = Rng::new(3003);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let a = -rng.range(0.05, 3.0);
        let d1 = rng.range(0.05, 2.0);
        let d2 = rng.range(0.05, 2.0);
        let b = rng.range(-2.0, 2.0);
        let x = rng.range(-2.0, 2.0);
        let abar = |dt: f64| (dt * a).exp();
        let bbar_x = |dt: f64| ((dt * a).exp() - 1.0) / a * b * x;
        let la = abar(d1 + d2);
        let ra = abar(d2) * abar(d1);
        let lb = bbar_x(d1 + d2);
        let rb = abar(d2) * bbar_x(d1) + bbar_x(d2);
        worst = worst.max((la - ra).abs() / la.abs().max(ra.abs()).max(1.0));
        worst = worst.max((lb - rb).abs() / lb.abs().max(rb.abs()).max(1.0));
    }
    assert!(worst <= 1e-12, "semigroup deviation {worst:e}");
    println!("ACCEPTANCE 3 zoh-semigroup: PASS (10000 triples, max deviation {worst:.2e})");
}

#[test]
fn c04_complexity_slopes() {
    let _g = serialize();
    let t0 = Instant::now();
    let lengths = [1 << 12, 1 << 13, 1 << 14, 1 << 15];
    let records = run_scaling_benchmark(&lengths, 64, 16, 5, 44, true).unwrap();
    let pts = |kind: KernelKind| -> Vec<(usize, u64)> {
        records
            .iter()
            .filter(|r| r.kernel == kind && !r.truncated)
            .map(|r| (r.l, r.wall_ns))
            .collect()
    };
    let scan_slope = loglog_slope(&pts(KernelKind::Scan));
    let attn_slope = loglog_slope(&pts(KernelKind::Attention));
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        (0.8..=1.3).contains(&scan_slope),
        "scan slope {scan_slope:.3} outside [0.8, 1.3]"
    );
    assert!(
        (1.7..=2.3).contains(&attn_slope),
        "attention slope {attn_slope:.3} outside [1.7, 2.3]"
    );
    assert!(secs < 300.0, "runtime {secs:.1}s exceeds 5 min");
    println!("ACCEPTANCE 4 complexity-slopes: PASS (scan {scan_slope:.3}, attention {attn_slope:.3}, {secs:.1}s)");
}

#[test]
fn c05_template_selection_exhaustive() {
    let _g = serialize();
    let t0 = Instant::now();
    for c_i in 0..=10_000u64 {
        for m in 1..=16usize {
            let s = select_template_indices(c_i, m);
            assert!(s.contains(&0), "C={c_i} M={m}: missing 0");
            assert!(s.len() <= m, "C={c_i} M={m}: cardinality {}", s.len());
            assert!(
                s.windows(2).all(|w| w[0] < w[1]),
                "C={c_i} M={m}: not strictly increasing"
            );
            if c_i >= 1 {
                assert!(s.iter().all(|&i| i < c_i), "C={c_i} M={m}: {s:?}");
            }
            if m == 1 {
                assert_eq!(s, vec![0]);
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "runtime {secs:.1}s exceeds 10s");
    println!("ACCEPTANCE 5 template-selection: PASS (C in [0,10000] x M in [1,16], {secs:.1}s)");
}

#[test]
fn c06_coordinate_vocabulary() {
    let _g = serialize();
    let mut rng = Rng::new(6006);
    let grids: [(usize, f64); 5] = [(10, 1.0), (100, 1.0), (400, 2.0), (50, 1.5), (1000, 4.0)];
    let per_grid = 200_000;
    for (nbins, alpha) in grids {
        let lo = 0.5 - alpha / 2.0;
        let bound = alpha / (2.0 * nbins as f64);
        for _ in 0..per_grid {
            let c = rng.range(-9.0, 10.0);
            let bin = discretize_coordinate(c, nbins, alpha);
            assert!((1..=nbins).contains(&bin));
            if c >= lo && c <= lo + alpha {
                let back = dediscretize(bin, nbins, alpha).unwrap();
                assert!(
                    (c - back).abs() <= bound + 1e-12,
                    "nbins={nbins} alpha={alpha}: roundtrip {} > {bound}",
                    (c - back).abs()
                );
            }
        }
    }
    println!("ACCEPTANCE 6 coordinate-vocabulary: PASS (10^6 coordinates over 5 grids)");
}

#[test]
fn c07_sequence_assembly() {
    let _g = serialize();
    let d = 4;
    let l_z = 64;
    let l_x = 256;
    let t_len = 7usize;
    let mut rng = Rng::new(7007);
    let vocab = CoordVocabulary::init(400, 2.0, t_len, d, &mut rng).unwrap();
    for m in [1usize, 3, 7] {
        let templates: Vec<TemplateTokens> = (0..m)
            .map(|i| TemplateTokens {
                rgb: Mat::random_normal(l_z, d, 1.0, &mut rng),
                tir: Mat::random_normal(l_z, d, 1.0, &mut rng),
                frame_index: i as u32,
            })
            .collect();
        let s_rgb = Mat::random_normal(l_x, d, 1.0, &mut rng);
        let s_tir = Mat::random_normal(l_x, d, 1.0, &mut rng);
        let boxes: Vec<Box2> = (0..t_len)
            .map(|i| Box2::new(0.1, 0.1, 0.3 + 0.01 * i as f64, 0.4))
            .collect();
        let prompts = embed_prompts(&boxes, &vocab).unwrap();

        for (use_prompts, expected) in [
            (false, 2 * m * l_z + 2 * l_x),
            (true, 2 * m * l_z + 2 * l_x + 4 * t_len + 4),
        ] {
            let canonical = build_sequence(
                &templates,
                &s_rgb,
                &s_tir,
                9,
                if use_prompts { Some(&prompts) } else { None },
                ConcatMode::Tsts,
                ScanOrder::Spatial,
            )
            .unwrap();
            assert_eq!(canonical.len(), expected, "M={m} prompts={use_prompts}");
            assert!(canonical.perm.iter().enumerate().all(|(i, &p)| i == p));

            let multiset = |seq: &scantrack_core::assembly::TokenSequence| {
                let mut v: Vec<(TokenTag, Vec<u64>)> = (0..seq.len())
                    .map(|i| {
                        (
                            seq.tags[i],
                            seq.tokens.row(i).iter().map(|x| x.to_bits()).collect(),
                        )
                    })
                    .collect();
                v.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
                v
            };
            let reference = multiset(&canonical);
            for mode in [ConcatMode::Tsts, ConcatMode::Ttss, ConcatMode::CrossTs] {
                for order in [ScanOrder::Spatial, ScanOrder::Temporal] {
                    let seq = build_sequence(
                        &templates,
                        &s_rgb,
                        &s_tir,
                        9,
                        if use_prompts { Some(&prompts) } else { None },
                        mode,
                        order,
                    )
                    .unwrap();
                    assert_eq!(multiset(&seq), reference, "multiset {mode}/{order}");
                    let (tokens, tags) = seq.canonicalize();
                    assert_eq!(tokens, canonical.tokens, "inverse perm {mode}/{order}");
                    assert_eq!(tags, canonical.tags);
                }
            }
        }
    }
    println!("ACCEPTANCE 7 sequence-assembly: PASS (M in {{1,3,7}}, 6 variants, inverse permutation exact)");
}

#[test]
fn c08_trajectory_prompt_benefit() {
    let _g = serialize();
    let t0 = Instant::now();
    let cfg = desk_config();
    let out = shared_training();
    let mut wins = 0;
    let mut mean_with = 0.0;
    let mut mean_without = 0.0;
    let runs = 20;
    for i in 0..runs {
        let spec = SyntheticSpec::new(9000 + i as u64, cfg.video_len, MotionProfile::OccludedSegment);
        let video = generate_synthetic_video(&spec).unwrap();
        let sr = |prompt_len: usize| -> f64 {
            let results = track_synthetic(
                &out.model,
                &video,
                cfg.template_count,
                prompt_len,
                cfg.concat_mode,
                cfg.scan_order,
            )
            .unwrap();
            let pred: Vec<Box2> = results.iter().map(|r| r.box_abs).collect();
            compute_metrics(&pred, &video.gt).unwrap().sr
        };
        let with = sr(cfg.prompt_len);
        let without = sr(0);
        if with > without {
            wins += 1;
        }
        mean_with += with;
        mean_without += without;
        println!(
            "  video {i:2}: SR with prompts {with:.3} vs without {without:.3} {}",
            if with > without { "(win)" } else { "" }
        );
    }
    mean_with /= runs as f64;
    mean_without /= runs as f64;
    let secs = t0.elapsed().as_secs_f64();
    assert!(
        mean_with > mean_without,
        "mean SR with prompts {mean_with:.3} not greater than without {mean_without:.3}"
    );
    assert!(wins >= 15, "paired improvement in only {wins}/20 videos");
    assert!(secs < 1800.0, "runtime {secs:.1}s exceeds 30 min");
    println!("ACCEPTANCE 8 trajectory-prompt-benefit: PASS (mean SR {mean_with:.3} vs {mean_without:.3}, {wins}/20 wins, {secs:.1}s)");
}

#[test]
fn c09_training_smoke() {
    let _g = serialize();
    let cfg = desk_config();
    let out = shared_training();
    assert_eq!(out.stage1_losses.len(), cfg.steps_stage1);
    let (first, last) = smoothed_ends(&out.stage1_losses, cfg.smooth_window);
    let ratio = last / first;
    assert!(
        ratio < 0.7,
        "stage-1 smoothed loss ratio {ratio:.3} not below 0.7 ({first:.4} -> {last:.4})"
    );
    assert!(
        out.handoff_after <= out.handoff_before,
        "head loss increased at handoff: {} -> {}",
        out.handoff_before,
        out.handoff_after
    );
    assert_eq!(out.stage1_prompt_reads, 0, "stage 1 read prompt boxes");

    // determinism under the seed: replaying the first 300 steps from the
    // same seed reproduces the loss trace bit for bit
    let videos = training_videos(&cfg).unwrap();
    let mut model = Model::init(cfg.seed, cfg.model_dims()).unwrap();
    let mut rng = Rng::new(cfg.seed).fork(0xF1);
    let replay = run_stage(&mut model, &videos, &cfg, false, 300, cfg.lr_stage1, &mut rng).unwrap();
    for (i, (a, b)) in replay.losses.iter().zip(&out.stage1_losses).enumerate() {
        assert_eq!(a.to_bits(), b.to_bits(), "loss trace diverged at step {i}");
    }
    println!("ACCEPTANCE 9 training-smoke: PASS (smoothed {first:.4} -> {last:.4}, ratio {ratio:.3}, handoff exact, 300-step replay bitwise)");
}

#[test]
fn c10_end_to_end_determinism() {
    let _g = serialize();
    let bin = env!("CARGO_BIN_EXE_scantrack");
    let dir = std::env::temp_dir().join("scantrack_acceptance_c10");
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();

    let run = |args: &[&str]| -> (Vec<u8>, i32) {
        let out = std::process::Command::new(bin)
            .args(args)
            .output()
            .expect("spawn scantrack");
        (out.stdout, out.status.code().unwrap_or(-1))
    };

    // selftest twice: byte-identical stdout, exit 0
    let (a, code_a) = run(&["selftest"]);
    let (b, code_b) = run(&["selftest"]);
    assert_eq!(code_a, 0);
    assert_eq!(code_b, 0);
    assert_eq!(a, b, "selftest stdout differs between runs");

    // gen + track twice with the same seed: byte-identical output files
    let vdir = dir.join("video");
    let (_, code) = run(&["gen", "--out", vdir.to_str().unwrap(), "--seed", "3", "--len", "10", "--profile", "occluded", "--size", "160"]);
    assert_eq!(code, 0);
    let p1 = dir.join("pred1.csv");
    let p2 = dir.join("pred2.csv");
    for p in [&p1, &p2] {
        let (_, code) = run(&["track", "--video", vdir.to_str().unwrap(), "--out", p.to_str().unwrap(), "--prompts", "2"]);
        assert_eq!(code, 0);
    }
    let t1 = std::fs::read(&p1).unwrap();
    let t2 = std::fs::read(&p2).unwrap();
    assert!(!t1.is_empty());
    assert_eq!(t1, t2, "track outputs differ between runs");

    // bench in deterministic (model-only) mode twice
    let b1 = dir.join("bench1.csv");
    let b2 = dir.join("bench2.csv");
    for p in [&b1, &b2] {
        let (_, code) = run(&["bench", "--out", p.to_str().unwrap(), "--lengths", "256,512,1024", "--dim", "16", "--state", "4", "--seed", "5", "--model-only"]);
        assert_eq!(code, 0);
    }
    let r1 = std::fs::read(&b1).unwrap();
    let r2 = std::fs::read(&b2).unwrap();
    assert!(!r1.is_empty());
    assert_eq!(r1, r2, "bench outputs differ between runs");

    // gen twice: frame files and gt byte-identical
    let vdir2 = dir.join("video2");
    let (_, code) = run(&["gen", "--out", vdir2.to_str().unwrap(), "--seed", "3", "--len", "10", "--profile", "occluded", "--size", "160"]);
    assert_eq!(code, 0);
    let m1 = std::fs::read(vdir.join("manifest.txt")).unwrap();
    let m2 = std::fs::read(vdir2.join("manifest.txt")).unwrap();
    assert_eq!(m1, m2);
    let f1 = std::fs::read(vdir.join("frames/rgb_00005.raw")).unwrap();
    let f2 = std::fs::read(vdir2.join("frames/rgb_00005.raw")).unwrap();
    assert_eq!(f1, f2);

    std::fs::remove_dir_all(&dir).ok();
    println!("ACCEPTANCE 10 end-to-end-determinism: PASS (selftest, track, bench byte-identical across runs)");
}
