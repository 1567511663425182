//! Desk-scale two-stage training on synthetic RGB-T videos.
//!
//! Stage 1 ("appearance"): multi-template input, no prompt tokens, search
//! frames drawn from spans where the target is visible; optimizes the head
//! losses (BCE on a Gaussian-smoothed center map plus L1 on offset and size
//! at the ground-truth cell). Stage 2 ("motion"): adds trajectory prompt and
//! query tokens, samples occluded spans too, adds the query L1 loss, and
//! runs at a tenth of the stage-1 learning rate.
//!
//! Gradients come from the hand-written backward passes; the optimizer is
//! Adam after a global-norm clip at 1 (see [`apply_adam`] for why plain
//! gradient descent is not enough here).

use crate::arrayfile;
use crate::config::{PromptSource, RunConfig, SampleMode};
use crate::geom::{Box2, CropTransform};
use crate::head::decode_box;
use crate::model::{AssembledInput, CropPair, Model, ModelError, ModelForward, ModelGrads};
use crate::num::sigmoid;
use crate::rng::Rng;
use crate::synthetic::{
    generate_synthetic_video, MotionProfile, SynthError, SyntheticSpec, SyntheticVideo,
};
use crate::tensor::Mat;
use crate::tracker::{crop_window, extract_crop, SEARCH_FACTOR, TEMPLATE_FACTOR};

pub const GRAD_CLIP_NORM: f64 = 1.0;
pub const QUERY_LOSS_WEIGHT: f64 = 1.0;
pub const SIZE_LOSS_WEIGHT: f64 = 1.0;
pub const OFFSET_LOSS_WEIGHT: f64 = 1.0;
/// Probability that a stage-2 sample is drawn from the occluded span when
/// the video has one.
pub const OCCLUDED_SAMPLE_BIAS: f64 = 0.5;

/// Which search frames a stage may sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFilter {
    /// Only frames where the target is visible (stage 1, appearance).
    VisibleOnly,
    /// Any frame.
    All,
    /// Any frame, but prefer the occluded span with probability
    /// [`OCCLUDED_SAMPLE_BIAS`] (stage 2, motion).
    PreferOccluded,
}
const CENTER_SIGMA_CELLS: f64 = 1.0;

#[derive(Debug)]
pub enum TrainError {
    VideoTooShort { len: usize, needed: usize },
    Model(ModelError),
    Synth(SynthError),
    NonFiniteLoss { step: usize, value: f64 },
    Transform(crate::geom::TransformError),
}

impl std::fmt::Display for TrainError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::VideoTooShort { len, needed } => {
                write!(f, "video with {len} frames cannot host a clip needing {needed}")
            }
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Synth(e) => write!(f, "{e}"),
            TrainError::NonFiniteLoss { step, value } => {
                write!(f, "training diverged at step {step}: loss = {value}")
            }
            TrainError::Transform(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<SynthError> for TrainError {
    fn from(e: SynthError) -> Self {
        TrainError::Synth(e)
    }
}

impl From<crate::geom::TransformError> for TrainError {
    fn from(e: crate::geom::TransformError) -> Self {
        TrainError::Transform(e)
    }
}

/// One training clip: template frame indices, the search frame, and the
/// prompt boxes (ground truth of the preceding prompt_len frames; empty when
/// prompts are disabled).
#[derive(Clone, Debug)]
pub struct Clip {
    pub template_frames: Vec<usize>,
    pub search_frame: usize,
    pub prompt_boxes: Vec<Box2>,
}

/// Samples template indices from the window of up to `max_interval` frames
/// before the search frame. Random mode draws without replacement; uniform
/// mode spreads evenly across the window (most recent frame for m = 1).
pub fn sample_training_clip(
    video: &SyntheticVideo,
    m: usize,
    t: usize,
    max_interval: usize,
    mode: SampleMode,
    filter: FrameFilter,
    rng: &mut Rng,
) -> Result<Clip, TrainError> {
    let needed = m.max(t).max(1) + 1;
    let min_s = m.max(t).max(1);
    let candidates: Vec<usize> = (min_s..video.len())
        .filter(|&s| filter != FrameFilter::VisibleOnly || video.target_visible(s))
        .collect();
    if candidates.is_empty() {
        return Err(TrainError::VideoTooShort {
            len: video.len(),
            needed,
        });
    }
    let mut s = candidates[rng.below(candidates.len())];
    if filter == FrameFilter::PreferOccluded && rng.next_f64() < OCCLUDED_SAMPLE_BIAS {
        let occluded: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&f| !video.target_visible(f))
            .collect();
        if !occluded.is_empty() {
            s = occluded[rng.below(occluded.len())];
        }
    }
    let lo = s - max_interval.min(s);
    let hi = s - 1;
    let template_frames = if m == 1 {
        vec![hi]
    } else {
        match mode {
            SampleMode::Uniform => (0..m).map(|i| lo + i * (hi - lo) / (m - 1)).collect(),
            SampleMode::Random => rng.distinct_indices(lo, hi, m),
        }
    };
    let prompt_boxes = (s - t..s).map(|f| video.gt[f]).collect();
    Ok(Clip {
        template_frames,
        search_frame: s,
        prompt_boxes,
    })
}

/// Regression targets for one search frame.
#[derive(Clone, Debug)]
pub struct SampleTarget {
    pub gt_norm: Box2,
    /// Gaussian-smoothed center map over the g*g grid.
    pub center_map: Vec<f64>,
    pub cell: usize,
    pub off_target: (f64, f64),
    pub size_target: (f64, f64),
}

pub fn build_target(gt_norm: &Box2, g: usize) -> SampleTarget {
    let (cx, cy) = gt_norm.center();
    let fx = (cx * g as f64).clamp(0.0, g as f64 - 1e-9);
    let fy = (cy * g as f64).clamp(0.0, g as f64 - 1e-9);
    let cj = fx.floor() as usize;
    let ci = fy.floor() as usize;
    let mut center_map = vec![0.0; g * g];
    for i in 0..g {
        for j in 0..g {
            let dy = i as f64 + 0.5 - fy;
            let dx = j as f64 + 0.5 - fx;
            center_map[i * g + j] =
                (-(dx * dx + dy * dy) / (2.0 * CENTER_SIGMA_CELLS * CENTER_SIGMA_CELLS)).exp();
        }
    }
    SampleTarget {
        gt_norm: *gt_norm,
        center_map,
        cell: ci * g + cj,
        off_target: (
            (fx - cj as f64 - 0.5).clamp(-0.499, 0.499),
            (fy - ci as f64 - 0.5).clamp(-0.499, 0.499),
        ),
        size_target: (
            gt_norm.width().clamp(1e-4, 0.999),
            gt_norm.height().clamp(1e-4, 0.999),
        ),
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub l1_off: f64,
    pub l1_size: f64,
    pub l1_query: f64,
}

impl LossParts {
    pub fn head(&self) -> f64 {
        self.bce + self.l1_off + self.l1_size
    }
}

/// Stable binary cross-entropy with logits: max(z,0) - z t + ln(1 + e^-|z|).
fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Forward pass, loss and logit-space cotangents for one sample.
pub fn sample_loss(
    model: &Model,
    asm: &AssembledInput,
    target: &SampleTarget,
) -> Result<(LossParts, ModelForward, Mat, Mat, Mat, Option<[f64; 4]>), TrainError> {
    let fwd = model.forward(asm)?;
    let g2 = target.center_map.len();
    let mut parts = LossParts::default();

    let mut d_score = Mat::zeros(1, g2);
    for p in 0..g2 {
        let z = fwd.maps.score_logits.get(0, p);
        let t = target.center_map[p];
        parts.bce += bce_with_logits(z, t);
        d_score.set(0, p, (sigmoid(z) - t) / g2 as f64);
    }
    parts.bce /= g2 as f64;

    let mut d_offset = Mat::zeros(2, g2);
    let cell = target.cell;
    for (dim, t) in [target.off_target.0, target.off_target.1].into_iter().enumerate() {
        let z = fwd.maps.offset_logits.get(dim, cell);
        let pred = sigmoid(z) - 0.5;
        parts.l1_off += OFFSET_LOSS_WEIGHT * (pred - t).abs() / 2.0;
        let sign = if pred > t { 1.0 } else if pred < t { -1.0 } else { 0.0 };
        let s = sigmoid(z);
        d_offset.set(dim, cell, OFFSET_LOSS_WEIGHT * sign * s * (1.0 - s) / 2.0);
    }

    let mut d_size = Mat::zeros(2, g2);
    for (dim, t) in [target.size_target.0, target.size_target.1].into_iter().enumerate() {
        let z = fwd.maps.size_logits.get(dim, cell);
        let pred = sigmoid(z);
        parts.l1_size += SIZE_LOSS_WEIGHT * (pred - t).abs() / 2.0;
        let sign = if pred > t { 1.0 } else if pred < t { -1.0 } else { 0.0 };
        let s = sigmoid(z);
        d_size.set(dim, cell, SIZE_LOSS_WEIGHT * sign * s * (1.0 - s) / 2.0);
    }

    let d_query = if let Some(q) = &fwd.query {
        let mut d = [0.0; 4];
        let pred = q.box_norm.coords();
        let gt = target.gt_norm.coords();
        for i in 0..4 {
            parts.l1_query += (pred[i] - gt[i]).abs() / 4.0;
            let sign = if pred[i] > gt[i] {
                1.0
            } else if pred[i] < gt[i] {
                -1.0
            } else {
                0.0
            };
            d[i] = QUERY_LOSS_WEIGHT * sign / 4.0;
        }
        parts.l1_query *= QUERY_LOSS_WEIGHT;
        Some(d)
    } else {
        None
    };

    parts.total = parts.bce + parts.l1_off + parts.l1_size + parts.l1_query;
    Ok((parts, fwd, d_score, d_offset, d_size, d_query))
}

/// Adam optimizer state (first/second moment estimates per parameter).
///
/// Plain clipped gradient descent was tried first and trains the appearance
/// pathway fine, but the trajectory-prompt circuit receives gradients two to
/// three orders of magnitude smaller than the appearance path and never
/// moves under a shared step size; per-parameter scaling is what makes the
/// motion stage trainable at this scale.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let shapes: Vec<usize> = {
            let mut probe = model.clone();
            probe.arrays_mut().iter().map(|a| a.len()).collect()
        };
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// Global-norm clip followed by an Adam update.
pub fn apply_adam(
    model: &mut Model,
    grads: &mut ModelGrads,
    state: &mut AdamState,
    lr: f64,
    clip_norm: f64,
) {
    let norm = grads.global_norm();
    let scale = if norm > clip_norm && norm > 0.0 {
        clip_norm / norm
    } else {
        1.0
    };
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let g_arrays: Vec<Vec<f64>> = grads.arrays_mut().iter().map(|a| a.to_vec()).collect();
    for (ai, (p, g)) in model.arrays_mut().into_iter().zip(g_arrays).enumerate() {
        let m = &mut state.m[ai];
        let v = &mut state.v[ai];
        for (i, (pv, gv)) in p.iter_mut().zip(g).enumerate() {
            let gc = gv * scale;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gc;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gc * gc;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            *pv -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

fn zero_grads(grads: &mut ModelGrads) {
    for a in grads.arrays_mut() {
        a.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Materializes the crops and targets for one clip against the live model
/// geometry (template crops at gt boxes, search crop around the previous
/// frame's gt box, prompts mapped into search coordinates).
pub struct PreparedSample {
    pub templates: Vec<(u32, CropPair)>,
    pub search: CropPair,
    pub transform: CropTransform,
    pub prompt_boxes_norm: Vec<Box2>,
    pub target_gt_norm: Box2,
    pub search_frame: usize,
}

pub fn prepare_sample(
    video: &SyntheticVideo,
    clip: &Clip,
    template_size: usize,
    search_size: usize,
    anchor_scale: f64,
    center_jitter: (f64, f64),
) -> Result<PreparedSample, TrainError> {
    let mut templates = Vec::with_capacity(clip.template_frames.len());
    for &f in &clip.template_frames {
        let (rgb, tir) = video.frame(f);
        let w = crop_window(&video.gt[f], TEMPLATE_FACTOR, rgb.w, rgb.h)?;
        templates.push((
            f as u32,
            CropPair {
                rgb: extract_crop(&rgb, &w, template_size),
                tir: extract_crop(&tir, &w, template_size),
            },
        ));
    }
    let s = clip.search_frame;
    let (rgb, tir) = video.frame(s);
    let anchor = video.gt[s - 1];
    let (acx, acy) = anchor.center();
    let scaled_w = anchor.width() * anchor_scale;
    let scaled_h = anchor.height() * anchor_scale;
    let side = SEARCH_FACTOR * (scaled_w * scaled_h).sqrt();
    let anchor = Box2::from_center(
        acx + center_jitter.0 * side,
        acy + center_jitter.1 * side,
        scaled_w,
        scaled_h,
    );
    let transform = crop_window(&anchor, SEARCH_FACTOR, rgb.w, rgb.h)?;
    let search = CropPair {
        rgb: extract_crop(&rgb, &transform, search_size),
        tir: extract_crop(&tir, &transform, search_size),
    };
    let prompt_boxes_norm = clip
        .prompt_boxes
        .iter()
        .map(|b| transform.abs_to_norm(b))
        .collect();
    Ok(PreparedSample {
        templates,
        search,
        transform,
        prompt_boxes_norm,
        target_gt_norm: transform.abs_to_norm(&video.gt[s]),
        search_frame: s,
    })
}

/// Replaces ground-truth prompt boxes with boxes predicted by the current
/// model on each prompt frame (no-prompt assembly, like stage-1 inference).
fn predicted_prompt_boxes(
    model: &Model,
    video: &SyntheticVideo,
    clip: &Clip,
    templates: &[(u32, CropPair)],
    cfg: &RunConfig,
) -> Result<Vec<Box2>, TrainError> {
    let t = clip.prompt_boxes.len();
    let mut out = Vec::with_capacity(t);
    for j in 0..t {
        let f = clip.search_frame - t + j;
        let (rgb, tir) = video.frame(f);
        let anchor = video.gt[f.saturating_sub(1)];
        let w = crop_window(&anchor, SEARCH_FACTOR, rgb.w, rgb.h)?;
        let search = CropPair {
            rgb: extract_crop(&rgb, &w, cfg.search_size),
            tir: extract_crop(&tir, &w, cfg.search_size),
        };
        let asm = model.assemble(
            templates,
            &search,
            f as u32,
            &[],
            false,
            cfg.concat_mode,
            cfg.scan_order,
        )?;
        let fwd = model.forward(&asm)?;
        let (bn, _) = decode_box(&fwd.maps);
        out.push(w.norm_to_abs(&bn));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct StageResult {
    /// Per-step batch-mean total loss.
    pub losses: Vec<f64>,
    pub parts_last: LossParts,
    /// How many times prompt boxes were materialized for a training sample
    /// (must be zero in stage 1).
    pub prompt_reads: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    model: &mut Model,
    videos: &[SyntheticVideo],
    cfg: &RunConfig,
    stage2: bool,
    steps: usize,
    lr: f64,
    rng: &mut Rng,
) -> Result<StageResult, TrainError> {
    let g = cfg.model_dims().grid();
    let t = if stage2 { cfg.prompt_len } else { 0 };
    let mut adam = AdamState::new(model);
    let mut grads = model.zeros_grads();
    let mut losses = Vec::with_capacity(steps);
    let mut parts_last = LossParts::default();
    let mut prompt_reads = 0usize;

    for step in 0..steps {
        zero_grads(&mut grads);
        let mut batch_loss = 0.0;
        let mut batch_parts = LossParts::default();
        for _ in 0..cfg.batch_size {
            let video = &videos[rng.below(videos.len())];
            let filter = if stage2 {
                FrameFilter::PreferOccluded
            } else {
                FrameFilter::VisibleOnly
            };
            let clip = sample_training_clip(
                video,
                cfg.template_count,
                t,
                cfg.max_interval,
                cfg.sample_mode,
                filter,
                rng,
            )?;
            if t > 0 {
                prompt_reads += 1;
            }
            let anchor_scale = rng.range(cfg.anchor_scale_min, cfg.anchor_scale_max);
            let center_jitter = if stage2 {
                (
                    rng.range(-cfg.stage2_center_jitter, cfg.stage2_center_jitter),
                    rng.range(-cfg.stage2_center_jitter, cfg.stage2_center_jitter),
                )
            } else {
                (0.0, 0.0)
            };
            let mut prep = prepare_sample(
                video,
                &clip,
                cfg.template_size,
                cfg.search_size,
                anchor_scale,
                center_jitter,
            )?;
            if stage2 && cfg.prompt_source == PromptSource::Predicted {
                let abs = predicted_prompt_boxes(model, video, &clip, &prep.templates, cfg)?;
                prep.prompt_boxes_norm =
                    abs.iter().map(|b| prep.transform.abs_to_norm(b)).collect();
            }
            let asm = model.assemble(
                &prep.templates,
                &prep.search,
                prep.search_frame as u32,
                &prep.prompt_boxes_norm,
                stage2,
                cfg.concat_mode,
                cfg.scan_order,
            )?;
            let target = build_target(&prep.target_gt_norm, g);
            let (parts, fwd, d_score, d_offset, d_size, d_query) =
                sample_loss(model, &asm, &target)?;
            model.backward(&asm, &fwd, &d_score, &d_offset, &d_size, d_query, &mut grads)?;
            batch_loss += parts.total;
            batch_parts.total += parts.total;
            batch_parts.bce += parts.bce;
            batch_parts.l1_off += parts.l1_off;
            batch_parts.l1_size += parts.l1_size;
            batch_parts.l1_query += parts.l1_query;
        }
        let inv = 1.0 / cfg.batch_size as f64;
        batch_loss *= inv;
        if !batch_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                value: batch_loss,
            });
        }
        grads.scale(inv);
        apply_adam(model, &mut grads, &mut adam, lr, GRAD_CLIP_NORM);
        losses.push(batch_loss);
        parts_last = LossParts {
            total: batch_parts.total * inv,
            bce: batch_parts.bce * inv,
            l1_off: batch_parts.l1_off * inv,
            l1_size: batch_parts.l1_size * inv,
            l1_query: batch_parts.l1_query * inv,
        };
    }
    Ok(StageResult {
        losses,
        parts_last,
        prompt_reads,
    })
}

/// The deterministic training video set: half occluded-segment, the rest
/// split between linear and sinusoidal motion.
pub fn training_videos(cfg: &RunConfig) -> Result<Vec<SyntheticVideo>, TrainError> {
    (0..cfg.train_videos)
        .map(|i| {
            let profile = match i % 3 {
                0 | 1 => MotionProfile::OccludedSegment,
                _ => {
                    if i % 6 == 2 {
                        MotionProfile::Linear
                    } else {
                        MotionProfile::Sinusoidal
                    }
                }
            };
            let mut spec = SyntheticSpec::new(
                Rng::new(cfg.seed).fork(0xD0 + i as u64).next_u64(),
                cfg.video_len,
                profile,
            );
            spec.frame_size = cfg.frame_size;
            spec.distractors = cfg.distractors;
            generate_synthetic_video(&spec).map_err(TrainError::from)
        })
        .collect()
}

/// Mean head loss (no prompts) on a fixed seeded evaluation batch; used for
/// the stage-1 -> stage-2 handoff check.
pub fn eval_head_loss(
    model: &Model,
    videos: &[SyntheticVideo],
    cfg: &RunConfig,
) -> Result<f64, TrainError> {
    let g = cfg.model_dims().grid();
    let mut rng = Rng::new(cfg.seed).fork(0xE0);
    let mut total = 0.0;
    let count = 4;
    for _ in 0..count {
        let video = &videos[rng.below(videos.len())];
        let clip = sample_training_clip(
            video,
            cfg.template_count,
            0,
            cfg.max_interval,
            cfg.sample_mode,
            FrameFilter::VisibleOnly,
            &mut rng,
        )?;
        let prep =
            prepare_sample(video, &clip, cfg.template_size, cfg.search_size, 1.0, (0.0, 0.0))?;
        let asm = model.assemble(
            &prep.templates,
            &prep.search,
            prep.search_frame as u32,
            &[],
            false,
            cfg.concat_mode,
            cfg.scan_order,
        )?;
        let target = build_target(&prep.target_gt_norm, g);
        let (parts, ..) = sample_loss(model, &asm, &target)?;
        total += parts.head();
    }
    Ok(total / count as f64)
}

/// Trailing means of the first and last `window` entries.
pub fn smoothed_ends(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(losses.len()).max(1);
    let first = losses[..w].iter().sum::<f64>() / w as f64;
    let last = losses[losses.len() - w..].iter().sum::<f64>() / w as f64;
    (first, last)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub stage1_losses: Vec<f64>,
    pub stage2_losses: Vec<f64>,
    /// Head loss on the fixed eval batch right after stage 1 ...
    pub handoff_before: f64,
    /// ... and after the checkpoint round trip at stage-2 start.
    pub handoff_after: f64,
    pub stage1_prompt_reads: usize,
}

/// Full two-stage smoke run, including a checkpoint round trip between the
/// stages so the handoff equality genuinely exercises serialization.
pub fn train_smoke(cfg: &RunConfig) -> Result<TrainOutcome, TrainError> {
    let videos = training_videos(cfg)?;
    let mut model = Model::init(cfg.seed, cfg.model_dims())?;

    let mut rng1 = Rng::new(cfg.seed).fork(0xF1);
    let stage1 = run_stage(
        &mut model,
        &videos,
        cfg,
        false,
        cfg.steps_stage1,
        cfg.lr_stage1,
        &mut rng1,
    )?;
    let handoff_before = eval_head_loss(&model, &videos, cfg)?;

    // checkpoint round trip
    let mut bytes = Vec::new();
    arrayfile::write_arrays(&mut bytes, &model.named_arrays())
        .map_err(|e| TrainError::Model(ModelError::ArrayFile(e)))?;
    let arrays = arrayfile::read_arrays(&mut bytes.as_slice())
        .map_err(|e| TrainError::Model(ModelError::ArrayFile(e)))?;
    let mut model2 = Model::from_arrays(arrays)?;
    let handoff_after = eval_head_loss(&model2, &videos, cfg)?;

    let mut rng2 = Rng::new(cfg.seed).fork(0xF2);
    let stage2 = run_stage(
        &mut model2,
        &videos,
        cfg,
        true,
        cfg.steps_stage2,
        cfg.lr_stage2,
        &mut rng2,
    )?;

    Ok(TrainOutcome {
        model: model2,
        stage1_losses: stage1.losses,
        stage2_losses: stage2.losses,
        handoff_before,
        handoff_after,
        stage1_prompt_reads: stage1.prompt_reads,
    })
}
