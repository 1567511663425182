//! Deterministic invariant suites behind the `selftest` subcommand. Each
//! suite re-verifies a core contract from library APIs alone and the whole
//! run stays within a few seconds.

use std::io::Write;

use crate::assembly::{
    build_sequence, dediscretize, discretize_coordinate, embed_prompts, ConcatMode,
    CoordVocabulary, ScanOrder, TemplateTokens,
};
use crate::bench;
use crate::config::RunConfig;
use crate::encoder::{self, EncoderDims};
use crate::fd;
use crate::geom::Box2;
use crate::metrics::compute_metrics;
use crate::num::{rel_dev, rel_err};
use crate::rng::Rng;
use crate::ssm::{self, sample_inputs, selective_scan, selective_scan_backward};
use crate::tensor::Mat;
use crate::tracker::{crop_window, select_template_indices, TrajectoryQueue};

type SuiteResult = Result<(), String>;

fn check(cond: bool, msg: impl Fn() -> String) -> SuiteResult {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn scan_vs_oracle() -> SuiteResult {
    let mut rng = Rng::new(0x5E1F);
    for i in 0..64 {
        let l = 1 + rng.below(96);
        let d = 1 + rng.below(8);
        let n = 1 + rng.below(6);
        let inputs = sample_inputs(&mut rng, l, d, n, i % 8 == 0);
        let fast = selective_scan(&inputs).map_err(|e| e.to_string())?;
        let slow = ssm::selective_scan_oracle(&inputs).map_err(|e| e.to_string())?;
        for (a, b) in fast.y.iter().zip(&slow.y) {
            if rel_dev(*a, *b) >= 1e-10 {
                return Err(format!("instance {i}: scan/oracle deviation {}", rel_dev(*a, *b)));
            }
        }
    }
    Ok(())
}

fn zoh_closed_forms() -> SuiteResult {
    let t = ssm::zoh_discretize(&[-1.0f64], &[2.0f64.ln()], &[1.0], &[1.0], 1, 1, 1)
        .map_err(|e| e.to_string())?;
    check((t.abar[0] - 0.5).abs() < 1e-14, || "Abar(ln 2, -1) != 0.5".into())?;
    check((t.bbar_x[0] - 0.5).abs() < 1e-14, || "Bbar_x(ln 2, -1) != 0.5".into())?;
    let t = ssm::zoh_discretize(&[-1.0f64, -2.0], &[1.0], &[1.0, 1.0], &[1.0], 1, 1, 2)
        .map_err(|e| e.to_string())?;
    check(
        (t.bbar_x[1] - (1.0 - (-2.0f64).exp()) / 2.0).abs() < 1e-14,
        || "per-channel Bbar mismatch".into(),
    )
}

fn zoh_semigroup() -> SuiteResult {
    let mut rng = Rng::new(0x2E61);
    for _ in 0..1000 {
        let a = -rng.range(0.05, 3.0);
        let d1 = rng.range(0.05, 2.0);
        let d2 = rng.range(0.05, 2.0);
        let b = rng.range(-2.0, 2.0);
        let x = rng.range(-2.0, 2.0);
        let abar = |dt: f64| (dt * a).exp();
        let bbar_x = |dt: f64| ((dt * a).exp() - 1.0) / a * b * x;
        let lhs_a = abar(d1 + d2);
        let rhs_a = abar(d2) * abar(d1);
        let lhs_b = bbar_x(d1 + d2);
        let rhs_b = abar(d2) * bbar_x(d1) + bbar_x(d2);
        let tol = |l: f64, r: f64| (l - r).abs() <= 1e-12 * l.abs().max(r.abs()).max(1.0);
        if !tol(lhs_a, rhs_a) || !tol(lhs_b, rhs_b) {
            return Err("semigroup identity violated".into());
        }
    }
    Ok(())
}

fn scan_linearity() -> SuiteResult {
    let mut rng = Rng::new(0x11EA);
    let mut inputs = sample_inputs(&mut rng, 24, 4, 3, false);
    inputs.h0.iter_mut().for_each(|v| *v = 0.0);
    let base = selective_scan(&inputs).map_err(|e| e.to_string())?;
    let scale = base.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for alpha in [2.0, -0.5, 10.0] {
        let mut scaled = inputs.clone();
        scaled.x.iter_mut().for_each(|v| *v *= alpha);
        let out = selective_scan(&scaled).map_err(|e| e.to_string())?;
        for (a, b) in out.y.iter().zip(&base.y) {
            if (a - alpha * b).abs() > 1e-12 * (alpha.abs() * scale).max(1.0) {
                return Err(format!("linearity violated at alpha {alpha}"));
            }
        }
    }
    Ok(())
}

fn scan_gradients() -> SuiteResult {
    let mut rng = Rng::new(0x6EAD);
    for (i, euler) in [(0, false), (1, false), (2, true)] {
        let inputs = sample_inputs(&mut rng, 5, 2, 2, euler);
        let wy: Vec<f64> = (0..10).map(|_| rng.normal()).collect();
        let grads = selective_scan_backward(&inputs, &wy, &vec![0.0; 4])
            .map_err(|e| e.to_string())?;
        let numeric = fd::central_diff(
            |p| {
                let mut probe = inputs.clone();
                probe.x.copy_from_slice(p);
                let out = selective_scan(&probe).unwrap();
                out.y.iter().zip(&wy).map(|(a, b)| a * b).sum()
            },
            &inputs.x,
            1e-5,
        );
        let err = fd::max_rel_err(&grads.d_x, &numeric);
        if err >= 1e-4 {
            return Err(format!("instance {i}: d_x error {err}"));
        }
    }
    Ok(())
}

fn encoder_contracts() -> SuiteResult {
    let dims = EncoderDims::new(6, 3, 1);
    let mut params = encoder::init_params(2, dims);
    params.layers[0].zero_biases();
    let zero = Mat::zeros(5, 6);
    let (out, _) = encoder::block_forward(&zero, &params.layers[0]);
    check(out.as_slice().iter().all(|v| *v == 0.0), || {
        "zero fixed point violated".into()
    })?;

    let params = encoder::init_params(3, dims);
    let seq = Mat::random_normal(7, 6, 1.0, &mut Rng::new(5));
    let (a, _) = encoder::encoder_forward(&seq, &params);
    let (b, _) = encoder::encoder_forward(&seq, &params);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        if x.to_bits() != y.to_bits() {
            return Err("encoder forward not bitwise deterministic".into());
        }
    }

    let w = Mat::random_normal(7, 6, 1.0, &mut Rng::new(6));
    let (_, cache) = encoder::block_forward(&seq, &params.layers[0]);
    let mut grads = encoder::BlockGrads::zeros_like(&params.layers[0]);
    let d_seq = encoder::block_backward(&seq, &params.layers[0], &cache, &w, &mut grads);
    let numeric = fd::central_diff(
        |p| {
            let probe = Mat::from_vec(7, 6, p.to_vec());
            let (out, _) = encoder::block_forward(&probe, &params.layers[0]);
            out.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum()
        },
        seq.as_slice(),
        1e-5,
    );
    let err = fd::max_rel_err(d_seq.as_slice(), &numeric);
    check(err < 1e-4, || format!("block gradient error {err}"))
}

fn conv_causality() -> SuiteResult {
    let mut rng = Rng::new(0xCA5A);
    let x = Mat::random_normal(12, 3, 1.0, &mut rng);
    let kernel = Mat::random_normal(3, 4, 1.0, &mut rng);
    let bias = [0.1, 0.2, -0.3];
    let base = encoder::causal_conv1d(&x, &kernel, &bias);
    let mut x2 = x.clone();
    x2.set(8, 0, 99.0);
    let out = encoder::causal_conv1d(&x2, &kernel, &bias);
    for t in 0..8 {
        if out.row(t) != base.row(t) {
            return Err(format!("future input leaked into position {t}"));
        }
    }
    Ok(())
}

fn template_indices() -> SuiteResult {
    for c_i in 0..3000u64 {
        for m in 1..=8usize {
            let s = select_template_indices(c_i, m);
            if !s.contains(&0) || s.len() > m {
                return Err(format!("bad set at C={c_i} M={m}: {s:?}"));
            }
            if s.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("not increasing at C={c_i} M={m}"));
            }
            if c_i >= 1 && s.iter().any(|&i| i >= c_i) {
                return Err(format!("index out of range at C={c_i} M={m}: {s:?}"));
            }
        }
    }
    check(select_template_indices(12345, 1) == vec![0], || {
        "M=1 must yield {0}".into()
    })
}

fn fifo_laws() -> SuiteResult {
    let mut q = TrajectoryQueue::new(5);
    for i in 0..23 {
        q.push(Box2::new(i as f64, 0.0, i as f64 + 1.0, 1.0));
        let expect = (i + 1).min(5);
        if q.len() != expect {
            return Err(format!("queue length {} != {expect}", q.len()));
        }
    }
    let tail: Vec<f64> = q.iter().map(|b| b.x_min).collect();
    check(tail == vec![18.0, 19.0, 20.0, 21.0, 22.0], || {
        format!("queue content wrong: {tail:?}")
    })
}

fn coord_vocab() -> SuiteResult {
    let mut rng = Rng::new(0xC0DE);
    for &(nbins, alpha) in &[(100usize, 1.0f64), (400, 2.0)] {
        let bound = alpha / (2.0 * nbins as f64);
        let lo = 0.5 - alpha / 2.0;
        for _ in 0..50_000 {
            let c = rng.range(-6.0, 7.0);
            let bin = discretize_coordinate(c, nbins, alpha);
            if !(1..=nbins).contains(&bin) {
                return Err(format!("bin {bin} out of range"));
            }
            if c >= lo && c <= lo + alpha {
                let back = dediscretize(bin, nbins, alpha).map_err(|e| e.to_string())?;
                if (c - back).abs() > bound + 1e-12 {
                    return Err(format!("roundtrip error {} > {bound}", (c - back).abs()));
                }
            }
        }
    }
    Ok(())
}

fn assembly_permutations() -> SuiteResult {
    let mut rng = Rng::new(0xA55E);
    let templates: Vec<TemplateTokens> = (0..2)
        .map(|i| TemplateTokens {
            rgb: Mat::random_normal(4, 5, 1.0, &mut rng),
            tir: Mat::random_normal(4, 5, 1.0, &mut rng),
            frame_index: i,
        })
        .collect();
    let s_rgb = Mat::random_normal(6, 5, 1.0, &mut rng);
    let s_tir = Mat::random_normal(6, 5, 1.0, &mut rng);
    let vocab = CoordVocabulary::init(50, 2.0, 2, 5, &mut rng).map_err(|e| e.to_string())?;
    let prompts = embed_prompts(
        &[Box2::new(0.1, 0.1, 0.4, 0.4), Box2::new(0.2, 0.2, 0.5, 0.5)],
        &vocab,
    )
    .map_err(|e| e.to_string())?;

    let canonical = build_sequence(
        &templates,
        &s_rgb,
        &s_tir,
        3,
        Some(&prompts),
        ConcatMode::Tsts,
        ScanOrder::Spatial,
    )
    .map_err(|e| e.to_string())?;
    let expected_len = 2 * 2 * 4 + 2 * 6 + 4 * 2 + 4;
    check(canonical.len() == expected_len, || {
        format!("length {} != {expected_len}", canonical.len())
    })?;
    for mode in [ConcatMode::Tsts, ConcatMode::Ttss, ConcatMode::CrossTs] {
        for order in [ScanOrder::Spatial, ScanOrder::Temporal] {
            let seq = build_sequence(&templates, &s_rgb, &s_tir, 3, Some(&prompts), mode, order)
                .map_err(|e| e.to_string())?;
            let (tokens, tags) = seq.canonicalize();
            if tokens != canonical.tokens || tags != canonical.tags {
                return Err(format!("inverse permutation failed for {mode}/{order}"));
            }
        }
    }
    Ok(())
}

fn crop_round_trip() -> SuiteResult {
    let b = Box2::new(50.0, 60.0, 90.0, 100.0);
    let t = crop_window(&b, 4.0, 640, 480).map_err(|e| e.to_string())?;
    let probe = Box2::new(10.0, 20.0, 200.0, 170.0);
    let back = t.norm_to_abs(&t.abs_to_norm(&probe));
    for (x, y) in probe.coords().iter().zip(back.coords().iter()) {
        if (x - y).abs() > 1e-6 {
            return Err("crop transform round trip drifted".into());
        }
    }
    Ok(())
}

fn metrics_known_values() -> SuiteResult {
    let gt: Vec<Box2> = (0..5).map(|i| Box2::new(i as f64, 0.0, i as f64 + 4.0, 4.0)).collect();
    let r = compute_metrics(&gt, &gt).map_err(|e| e.to_string())?;
    check(r.pr == 1.0 && r.sr == 1.0, || "perfect tracking != 1.0".into())?;
    let pred = vec![Box2::new(0.0, 0.0, 2.0, 2.0)];
    let gtb = vec![Box2::new(1.0, 0.0, 3.0, 2.0)];
    let r = compute_metrics(&pred, &gtb).map_err(|e| e.to_string())?;
    check((r.iou_trace[0] - 1.0 / 3.0).abs() < 1e-12, || {
        "hand IoU mismatch".into()
    })
}

fn config_round_trip() -> SuiteResult {
    let mut cfg = RunConfig::default();
    cfg.seed = 99;
    cfg.lr_stage1 = 0.015625;
    let back = RunConfig::parse(&cfg.to_text()).map_err(|e| e.to_string())?;
    check(back == cfg, || "config round trip not identity".into())
}

fn arrayfile_round_trip() -> SuiteResult {
    let arrays = vec![crate::arrayfile::NamedArray {
        name: "probe".into(),
        shape: vec![3],
        values: vec![0.1, -2.5e-200, 7.0],
    }];
    let mut buf = Vec::new();
    crate::arrayfile::write_arrays(&mut buf, &arrays).map_err(|e| e.to_string())?;
    let back = crate::arrayfile::read_arrays(&mut buf.as_slice()).map_err(|e| e.to_string())?;
    check(back == arrays, || "array container round trip failed".into())
}

fn attention_vs_naive() -> SuiteResult {
    let mut rng = Rng::new(0xA77E);
    let (l, d) = (32, 8);
    let q: Vec<f64> = (0..l * d).map(|_| rng.normal()).collect();
    let k: Vec<f64> = (0..l * d).map(|_| rng.normal()).collect();
    let v: Vec<f64> = (0..l * d).map(|_| rng.normal()).collect();
    let mut out = vec![0.0; l * d];
    bench::attention_forward(&q, &k, &v, l, d, &mut out);
    let naive = bench::attention_naive_f64(&q, &k, &v, l, d);
    for (a, b) in out.iter().zip(&naive) {
        if rel_dev(*a, *b) >= 1e-10 {
            return Err(format!("attention deviates from oracle by {}", rel_dev(*a, *b)));
        }
    }
    Ok(())
}

fn flops_models() -> SuiteResult {
    check(
        bench::flops_scan(2048, 8, 4) == 2 * bench::flops_scan(1024, 8, 4),
        || "scan flops not linear".into(),
    )?;
    let r = bench::flops_attention(1 << 18, 64) as f64 / bench::flops_attention(1 << 17, 64) as f64;
    check((r - 4.0).abs() < 0.05, || {
        format!("attention flops ratio {r} not ~4")
    })
}

fn query_midpoint() -> SuiteResult {
    let q = crate::head::QueryReadout::init(8, &mut Rng::new(1));
    let tokens = Mat::zeros(4, 8);
    let (b, _) = crate::head::query_readout(&q, &tokens, 2.0);
    for c in b.coords() {
        if rel_err(c, 0.5) > 1e-12 {
            return Err("zero query tokens should read out the range midpoint".into());
        }
    }
    Ok(())
}

/// Runs every suite, printing one line each; returns true when all pass.
pub fn run_selftest(out: &mut impl Write) -> std::io::Result<bool> {
    let suites: &[(&str, fn() -> SuiteResult)] = &[
        ("scan_vs_oracle", scan_vs_oracle),
        ("zoh_closed_forms", zoh_closed_forms),
        ("zoh_semigroup", zoh_semigroup),
        ("scan_linearity", scan_linearity),
        ("scan_gradients", scan_gradients),
        ("encoder_contracts", encoder_contracts),
        ("conv_causality", conv_causality),
        ("template_indices", template_indices),
        ("fifo_laws", fifo_laws),
        ("coord_vocab", coord_vocab),
        ("assembly_permutations", assembly_permutations),
        ("crop_round_trip", crop_round_trip),
        ("metrics_known_values", metrics_known_values),
        ("config_round_trip", config_round_trip),
        ("arrayfile_round_trip", arrayfile_round_trip),
        ("attention_vs_naive", attention_vs_naive),
        ("flops_models", flops_models),
        ("query_midpoint", query_midpoint),
    ];
    let mut all_ok = true;
    for (name, f) in suites {
        match f() {
            Ok(()) => writeln!(out, "ok   {name}")?,
            Err(msg) => {
                all_ok = false;
                writeln!(out, "FAIL {name}: {msg}")?;
            }
        }
    }
    writeln!(
        out,
        "selftest: {}",
        if all_ok { "all suites passed" } else { "FAILURES" }
    )?;
    Ok(all_ok)
}
