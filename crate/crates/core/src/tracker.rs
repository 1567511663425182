//! Tracking loop: template memory governed by the closed-form selection
//! rule, FIFO trajectory queue, search-region cropping, and the per-frame
//! state update. The predictor is a trait so the pipeline mechanics are
//! testable with a stub in place of the full model.

use std::collections::VecDeque;

use crate::assembly::{ConcatMode, Image, ScanOrder};
use crate::geom::{Box2, CropTransform, TransformError};
use crate::head::decode_box;
use crate::model::{CropPair, Model, ModelError};

#[derive(Debug)]
pub enum TrackError {
    Transform(TransformError),
    Model(ModelError),
    FrameSizeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    BadInitBox,
}

impl std::fmt::Display for TrackError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrackError::Transform(e) => write!(f, "transform: {e}"),
            TrackError::Model(e) => write!(f, "model: {e}"),
            TrackError::FrameSizeMismatch { expected, got } => {
                write!(f, "frame size {got:?} does not match {expected:?}")
            }
            TrackError::BadInitBox => write!(f, "initial box is degenerate or out of frame"),
        }
    }
}

impl std::error::Error for TrackError {}

impl From<TransformError> for TrackError {
    fn from(e: TransformError) -> Self {
        TrackError::Transform(e)
    }
}

impl From<ModelError> for TrackError {
    fn from(e: ModelError) -> Self {
        TrackError::Model(e)
    }
}

/// Template index set for current frame `c_i` and capacity `m`:
/// {0} for m = 1, otherwise {0} union {i*K + floor(K/2)} with
/// K = floor(c_i / m), deduplicated and sorted. When the raw set exceeds m,
/// index 0 is kept along with the m-1 largest dynamic indices.
pub fn select_template_indices(c_i: u64, m: usize) -> Vec<u64> {
    assert!(m >= 1);
    if m == 1 {
        return vec![0];
    }
    let k = c_i / m as u64;
    let mut set = vec![0u64];
    for i in 0..m as u64 {
        let idx = i * k + k / 2;
        if !set.contains(&idx) {
            set.push(idx);
        }
    }
    set.sort_unstable();
    if set.len() > m {
        // keep {0} plus the m-1 largest
        let tail = set.split_off(set.len() - (m - 1));
        set = vec![0];
        set.extend(tail);
    }
    set
}

/// Fixed-capacity template slots: (frame index, crop) pairs, frame 0 always
/// present and never replaced.
#[derive(Clone, Debug)]
pub struct TemplateMemory {
    capacity: usize,
    slots: Vec<(u64, CropPair)>,
}

impl TemplateMemory {
    pub fn new(capacity: usize, initial: CropPair) -> Self {
        TemplateMemory {
            capacity,
            slots: vec![(0, initial)],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> &[(u64, CropPair)] {
        &self.slots
    }

    pub fn frame_indices(&self) -> Vec<u64> {
        self.slots.iter().map(|(f, _)| *f).collect()
    }

    /// Rebuilds the slots to hold exactly the selected indices for frame
    /// `c_i`, pulling crops from `cache` (cache[i] = crop captured at frame
    /// i). The frame-0 slot keeps the ground-truth initialization crop.
    pub fn update(&mut self, c_i: u64, cache: &[CropPair]) {
        let indices = select_template_indices(c_i, self.capacity);
        let init = self.slots[0].1.clone();
        self.slots = indices
            .into_iter()
            .map(|idx| {
                if idx == 0 {
                    (0, init.clone())
                } else {
                    (idx, cache[idx as usize].clone())
                }
            })
            .collect();
    }
}

/// FIFO of at most `capacity` past boxes in absolute pixels, oldest first.
#[derive(Clone, Debug)]
pub struct TrajectoryQueue {
    capacity: usize,
    entries: VecDeque<Box2>,
}

impl TrajectoryQueue {
    pub fn new(capacity: usize) -> Self {
        TrajectoryQueue {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, b: Box2) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(b);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Box2> {
        self.entries.iter()
    }

    /// The most recent `count` boxes, oldest first.
    pub fn last_n(&self, count: usize) -> Vec<Box2> {
        let skip = self.entries.len().saturating_sub(count);
        self.entries.iter().skip(skip).cloned().collect()
    }
}

/// Square window centered on the box, side = factor * sqrt(area), floored at
/// 8 px for degenerate boxes. The window is not shifted at frame borders;
/// out-of-frame content replicates edge pixels and the overhang is recorded
/// in the transform.
pub fn crop_window(
    prev_box: &Box2,
    factor: f64,
    frame_w: usize,
    frame_h: usize,
) -> Result<CropTransform, TransformError> {
    let side = (factor * prev_box.area().sqrt()).max(8.0);
    let (cx, cy) = prev_box.center();
    let x0 = cx - side / 2.0;
    let y0 = cy - side / 2.0;
    let padding = [
        (-x0).max(0.0),
        (-y0).max(0.0),
        (x0 + side - frame_w as f64).max(0.0),
        (y0 + side - frame_h as f64).max(0.0),
    ];
    CropTransform::new(x0, y0, side, padding)
}

/// Bilinear resample of the window into an out_size x out_size patch.
pub fn extract_crop(img: &Image, t: &CropTransform, out_size: usize) -> Image {
    let mut out = Image::zeros(out_size, out_size, img.c);
    let scale = t.side / out_size as f64;
    for ch in 0..img.c {
        for oy in 0..out_size {
            let fy = t.y0 + (oy as f64 + 0.5) * scale - 0.5;
            for ox in 0..out_size {
                let fx = t.x0 + (ox as f64 + 0.5) * scale - 0.5;
                out.set(ch, oy, ox, img.sample(ch, fy, fx));
            }
        }
    }
    out
}

pub fn crop_search_region(
    img: &Image,
    prev_box: &Box2,
    factor: f64,
    out_size: usize,
) -> Result<(CropTransform, Image), TrackError> {
    let t = crop_window(prev_box, factor, img.w, img.h)?;
    let patch = extract_crop(img, &t, out_size);
    Ok((t, patch))
}

/// Template crop window factor; with the default 64/128 resolutions this
/// matches the search factor below at a 2x resolution ratio.
pub const TEMPLATE_FACTOR: f64 = 2.0;
/// Search crop window factor relative to the tracked box.
pub const SEARCH_FACTOR: f64 = 4.0;

#[derive(Clone, Copy, Debug)]
pub struct TrackerConfig {
    pub template_count: usize,
    pub prompt_len: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub template_factor: f64,
    pub search_factor: f64,
    pub mode: ConcatMode,
    pub order: ScanOrder,
}

impl TrackerConfig {
    pub fn from_model(model: &Model, template_count: usize, prompt_len: usize) -> Self {
        TrackerConfig {
            template_count,
            prompt_len,
            template_size: model.dims.template_size,
            search_size: model.dims.search_size,
            template_factor: TEMPLATE_FACTOR,
            search_factor: SEARCH_FACTOR,
            mode: ConcatMode::Tsts,
            order: ScanOrder::Spatial,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrackerState {
    pub memory: TemplateMemory,
    pub queue: TrajectoryQueue,
    pub last_box: Box2,
    /// Index of the next frame to process (frame 0 is the init frame).
    pub next_frame: u64,
    pub frame_w: usize,
    pub frame_h: usize,
    /// Crop captured at the (predicted) box of each processed frame;
    /// index 0 holds the ground-truth initialization crop.
    crop_cache: Vec<CropPair>,
}

/// Everything a predictor may look at for one frame.
pub struct StepContext<'a> {
    pub transform: CropTransform,
    pub search: &'a CropPair,
    pub templates: &'a [(u64, CropPair)],
    /// Prompt boxes mapped into search coordinates, oldest first.
    pub prompt_boxes: &'a [Box2],
    pub frame_index: u64,
}

pub trait SearchPredictor {
    /// Returns the predicted box in search-normalized coordinates plus a
    /// confidence in [0, 1].
    fn predict(&self, ctx: &StepContext<'_>) -> Result<(Box2, f64), TrackError>;
}

/// The real model-backed predictor.
pub struct ModelPredictor<'m> {
    pub model: &'m Model,
    pub mode: ConcatMode,
    pub order: ScanOrder,
    pub prompts_enabled: bool,
}

impl SearchPredictor for ModelPredictor<'_> {
    fn predict(&self, ctx: &StepContext<'_>) -> Result<(Box2, f64), TrackError> {
        let templates: Vec<(u32, CropPair)> = ctx
            .templates
            .iter()
            .map(|(f, c)| (*f as u32, c.clone()))
            .collect();
        let asm = self.model.assemble(
            &templates,
            ctx.search,
            ctx.frame_index as u32,
            ctx.prompt_boxes,
            self.prompts_enabled,
            self.mode,
            self.order,
        )?;
        let fwd = self.model.forward(&asm)?;
        Ok(decode_box(&fwd.maps))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepResult {
    pub frame_index: u64,
    pub box_abs: Box2,
    pub confidence: f64,
}

fn crop_pair(
    rgb: &Image,
    tir: &Image,
    t: &CropTransform,
    out_size: usize,
) -> CropPair {
    CropPair {
        rgb: extract_crop(rgb, t, out_size),
        tir: extract_crop(tir, t, out_size),
    }
}

/// Builds the initial state from the frame-0 ground truth.
pub fn init_state(
    rgb: &Image,
    tir: &Image,
    gt: &Box2,
    cfg: &TrackerConfig,
) -> Result<TrackerState, TrackError> {
    if !gt.is_valid() || gt.x_min < 0.0 || gt.y_min < 0.0 {
        return Err(TrackError::BadInitBox);
    }
    if gt.x_max > rgb.w as f64 || gt.y_max > rgb.h as f64 {
        return Err(TrackError::BadInitBox);
    }
    let t = crop_window(gt, cfg.template_factor, rgb.w, rgb.h)?;
    let init_crop = crop_pair(rgb, tir, &t, cfg.template_size);
    Ok(TrackerState {
        memory: TemplateMemory::new(cfg.template_count, init_crop.clone()),
        queue: TrajectoryQueue::new(cfg.prompt_len.max(1)),
        last_box: *gt,
        next_frame: 1,
        frame_w: rgb.w,
        frame_h: rgb.h,
        crop_cache: vec![init_crop],
    })
}

/// One tracking step: crop search regions from both modalities, map queued
/// boxes into search coordinates, predict, map back, push the trajectory,
/// refresh the template memory and advance the counter.
pub fn track_step<P: SearchPredictor>(
    state: &mut TrackerState,
    predictor: &P,
    rgb: &Image,
    tir: &Image,
    cfg: &TrackerConfig,
) -> Result<StepResult, TrackError> {
    if rgb.w != state.frame_w || rgb.h != state.frame_h || tir.w != state.frame_w {
        return Err(TrackError::FrameSizeMismatch {
            expected: (state.frame_w, state.frame_h),
            got: (rgb.w, rgb.h),
        });
    }
    let cur = state.next_frame;

    let transform = crop_window(&state.last_box, cfg.search_factor, rgb.w, rgb.h)?;
    let search = crop_pair(rgb, tir, &transform, cfg.search_size);

    let prompt_abs = state.queue.last_n(cfg.prompt_len);
    let prompt_boxes: Vec<Box2> = prompt_abs.iter().map(|b| transform.abs_to_norm(b)).collect();

    let ctx = StepContext {
        transform,
        search: &search,
        templates: state.memory.slots(),
        prompt_boxes: &prompt_boxes,
        frame_index: cur,
    };
    let (box_norm, confidence) = predictor.predict(&ctx)?;

    let box_abs = transform
        .norm_to_abs(&box_norm)
        .clamp_to(state.frame_w as f64, state.frame_h as f64, 1.0);

    state.queue.push(box_abs);

    let tmpl_window = crop_window(&box_abs, cfg.template_factor, rgb.w, rgb.h)?;
    let crop = crop_pair(rgb, tir, &tmpl_window, cfg.template_size);
    debug_assert_eq!(state.crop_cache.len(), cur as usize);
    state.crop_cache.push(crop);
    state.memory.update(cur, &state.crop_cache);

    state.last_box = box_abs;
    state.next_frame += 1;
    Ok(StepResult {
        frame_index: cur,
        box_abs,
        confidence,
    })
}

/// Runs the full tracking loop over an in-memory synthetic video, starting
/// from its frame-0 ground truth. Returns one result per frame including
/// frame 0 (the init box with confidence 1).
pub fn track_synthetic(
    model: &Model,
    video: &crate::synthetic::SyntheticVideo,
    template_count: usize,
    prompt_len: usize,
    mode: ConcatMode,
    order: ScanOrder,
) -> Result<Vec<StepResult>, TrackError> {
    let mut cfg = TrackerConfig::from_model(model, template_count, prompt_len);
    cfg.mode = mode;
    cfg.order = order;
    let predictor = ModelPredictor {
        model,
        mode,
        order,
        prompts_enabled: prompt_len > 0,
    };
    let (rgb0, tir0) = video.frame(0);
    let mut state = init_state(&rgb0, &tir0, &video.gt[0], &cfg)?;
    let mut out = vec![StepResult {
        frame_index: 0,
        box_abs: video.gt[0],
        confidence: 1.0,
    }];
    for i in 1..video.len() {
        let (rgb, tir) = video.frame(i);
        out.push(track_step(&mut state, &predictor, &rgb, &tir, &cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selection_formula_stated_cases() {
        for c in [0, 1, 5, 1000] {
            assert_eq!(select_template_indices(c, 1), vec![0]);
        }
        // C=21, M=3: K=7 -> raw {0,3,10,17} -> capped to {0,10,17}
        assert_eq!(select_template_indices(21, 3), vec![0, 10, 17]);
        // C=2, M=3: K=0 -> everything collapses to {0}
        assert_eq!(select_template_indices(2, 3), vec![0]);
    }

    #[test]
    fn selection_invariants_sweep() {
        for c_i in 0..2000u64 {
            for m in 1..=8usize {
                let s = select_template_indices(c_i, m);
                assert!(s.contains(&0));
                assert!(s.len() <= m);
                for w in s.windows(2) {
                    assert!(w[0] < w[1], "not strictly increasing: {s:?}");
                }
                if c_i >= 1 {
                    assert!(s.iter().all(|&i| i < c_i.max(1)), "c={c_i} m={m}: {s:?}");
                }
            }
        }
    }

    #[test]
    fn fifo_laws() {
        let mut q = TrajectoryQueue::new(3);
        let b = |i: f64| Box2::new(i, i, i + 1.0, i + 1.0);
        q.push(b(0.0));
        assert_eq!(q.len(), 1);
        for i in 1..10 {
            q.push(b(i as f64));
        }
        assert_eq!(q.len(), 3);
        let last: Vec<f64> = q.iter().map(|x| x.x_min).collect();
        assert_eq!(last, vec![7.0, 8.0, 9.0]);
        assert_eq!(q.last_n(2).len(), 2);
        assert_eq!(q.last_n(2)[0].x_min, 8.0);
        assert_eq!(q.last_n(99).len(), 3);
    }

    #[test]
    fn crop_window_arithmetic() {
        // factor 4 on a 32x32 box: side 128, matching the template/search ratio
        let b = Box2::new(100.0, 100.0, 132.0, 132.0);
        let t = crop_window(&b, 4.0, 640, 480).unwrap();
        assert!((t.side - 128.0).abs() < 1e-12);
        assert_eq!(t.padding, [0.0; 4]);

        // corner box: overhang recorded
        let c = Box2::new(0.0, 0.0, 32.0, 32.0);
        let t = crop_window(&c, 4.0, 640, 480).unwrap();
        assert!(t.padding[0] > 0.0 && t.padding[1] > 0.0);
        assert_eq!(t.padding[2], 0.0);

        // degenerate box: floor at 8 px
        let d = Box2::new(10.0, 10.0, 10.0, 10.0);
        let t = crop_window(&d, 4.0, 640, 480).unwrap();
        assert!((t.side - 8.0).abs() < 1e-12);
    }

    #[test]
    fn queue_to_search_coords_round_trip() {
        let b = Box2::new(50.0, 60.0, 90.0, 100.0);
        let t = crop_window(&b, 4.0, 640, 480).unwrap();
        for probe in [
            Box2::new(40.0, 55.0, 80.0, 95.0),
            Box2::new(0.0, 0.0, 10.0, 10.0),
        ] {
            let back = t.norm_to_abs(&t.abs_to_norm(&probe));
            for (x, y) in probe.coords().iter().zip(back.coords().iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    struct PerfectOracle {
        gt: Vec<Box2>,
    }

    impl SearchPredictor for PerfectOracle {
        fn predict(&self, ctx: &StepContext<'_>) -> Result<(Box2, f64), TrackError> {
            Ok((
                ctx.transform.abs_to_norm(&self.gt[ctx.frame_index as usize]),
                1.0,
            ))
        }
    }

    fn flat_frames(n: usize, w: usize, h: usize) -> Vec<(Image, Image)> {
        (0..n)
            .map(|_| (Image::zeros(h, w, 3), Image::zeros(h, w, 3)))
            .collect()
    }

    fn toy_cfg() -> TrackerConfig {
        TrackerConfig {
            template_count: 3,
            prompt_len: 4,
            template_size: 16,
            search_size: 32,
            template_factor: 2.0,
            search_factor: 4.0,
            mode: ConcatMode::Tsts,
            order: ScanOrder::Spatial,
        }
    }

    #[test]
    fn perfect_oracle_tracks_exactly() {
        let n = 20;
        let gt: Vec<Box2> = (0..n)
            .map(|i| {
                let o = 40.0 + 3.0 * i as f64;
                Box2::new(o, o, o + 24.0, o + 24.0)
            })
            .collect();
        let frames = flat_frames(n, 256, 256);
        let cfg = toy_cfg();
        let oracle = PerfectOracle { gt: gt.clone() };
        let mut state = init_state(&frames[0].0, &frames[0].1, &gt[0], &cfg).unwrap();
        for i in 1..n {
            let r = track_step(&mut state, &oracle, &frames[i].0, &frames[i].1, &cfg).unwrap();
            let iou = r.box_abs.iou(&gt[i]);
            assert!(iou > 0.999999, "frame {i}: iou {iou}");
            // queue length = min(F, capacity)
            assert_eq!(state.queue.len(), i.min(cfg.prompt_len));
            // memory indices follow the capped formula
            assert_eq!(
                state.memory.frame_indices(),
                select_template_indices(i as u64, cfg.template_count)
            );
        }
    }

    struct WildStub;

    impl SearchPredictor for WildStub {
        fn predict(&self, _ctx: &StepContext<'_>) -> Result<(Box2, f64), TrackError> {
            Ok((Box2::new(-5.0, -7.0, 30.0, 40.0), 0.3))
        }
    }

    #[test]
    fn predictions_clamped_to_frame() {
        let frames = flat_frames(4, 128, 96);
        let cfg = toy_cfg();
        let gt = Box2::new(10.0, 10.0, 40.0, 40.0);
        let mut state = init_state(&frames[0].0, &frames[0].1, &gt, &cfg).unwrap();
        for f in frames.iter().skip(1) {
            let r = track_step(&mut state, &WildStub, &f.0, &f.1, &cfg).unwrap();
            assert!(r.box_abs.x_min >= 0.0 && r.box_abs.y_min >= 0.0);
            assert!(r.box_abs.x_max <= 128.0 && r.box_abs.y_max <= 96.0);
            assert!(r.box_abs.is_valid());
        }
    }

    #[test]
    fn stub_tracking_deterministic() {
        let n = 10;
        let gt: Vec<Box2> = (0..n)
            .map(|i| {
                let o = 30.0 + 2.0 * i as f64;
                Box2::new(o, o, o + 20.0, o + 20.0)
            })
            .collect();
        let frames = flat_frames(n, 200, 200);
        let cfg = toy_cfg();
        let run = || -> Vec<[u64; 4]> {
            let oracle = PerfectOracle { gt: gt.clone() };
            let mut state = init_state(&frames[0].0, &frames[0].1, &gt[0], &cfg).unwrap();
            (1..n)
                .map(|i| {
                    let r =
                        track_step(&mut state, &oracle, &frames[i].0, &frames[i].1, &cfg).unwrap();
                    [
                        r.box_abs.x_min.to_bits(),
                        r.box_abs.y_min.to_bits(),
                        r.box_abs.x_max.to_bits(),
                        r.box_abs.y_max.to_bits(),
                    ]
                })
                .collect()
        };
        assert_eq!(run(), run());
    }
}
