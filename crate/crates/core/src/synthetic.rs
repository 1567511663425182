//! Deterministic synthetic RGB-T videos: a textured square target moving
//! over a smooth noise background with confusable distractors. The thermal
//! channel renders the target hot, distractors lukewarm and the background
//! cool, so the modalities genuinely complement each other. Frames render
//! on demand from the scene parameters, keeping memory flat regardless of
//! video length.
//!
//! The occluded-segment profile hides the target's pixels for a contiguous
//! span while the ground truth keeps moving, which is what the trajectory
//! prompts are for.

use std::io::Write;
use std::path::Path;

use crate::assembly::{AssemblyError, Image};
use crate::geom::Box2;
use crate::metrics;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotionProfile {
    Linear,
    Sinusoidal,
    OccludedSegment,
}

impl std::str::FromStr for MotionProfile {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(MotionProfile::Linear),
            "sinusoidal" => Ok(MotionProfile::Sinusoidal),
            "occluded" => Ok(MotionProfile::OccludedSegment),
            other => Err(format!("unknown profile: {other}")),
        }
    }
}

impl std::fmt::Display for MotionProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            MotionProfile::Linear => "linear",
            MotionProfile::Sinusoidal => "sinusoidal",
            MotionProfile::OccludedSegment => "occluded",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub len: usize,
    pub frame_size: usize,
    pub profile: MotionProfile,
    pub distractors: usize,
}

impl SyntheticSpec {
    pub fn new(seed: u64, len: usize, profile: MotionProfile) -> Self {
        SyntheticSpec {
            seed,
            len,
            frame_size: 320,
            profile,
            distractors: match profile {
                MotionProfile::OccludedSegment => 2,
                _ => 1,
            },
        }
    }
}

#[derive(Debug)]
pub enum SynthError {
    TooShort { len: usize },
    Assembly(AssemblyError),
    Io(std::io::Error),
    BadManifest { line: usize, msg: String },
    Metrics(metrics::MetricsError),
}

impl std::fmt::Display for SynthError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SynthError::TooShort { len } => write!(f, "video length {len} < 2"),
            SynthError::Assembly(e) => write!(f, "{e}"),
            SynthError::Io(e) => write!(f, "io error: {e}"),
            SynthError::BadManifest { line, msg } => write!(f, "manifest line {line}: {msg}"),
            SynthError::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for SynthError {}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::Io(e)
    }
}

impl From<AssemblyError> for SynthError {
    fn from(e: AssemblyError) -> Self {
        SynthError::Assembly(e)
    }
}

struct SquareActor {
    /// Center per frame, precomputed.
    centers: Vec<(f64, f64)>,
    half: f64,
    color: [f64; 3],
    /// Checker modulation amplitude.
    checker: f64,
    tir: f64,
}

impl SquareActor {
    fn boxed(&self, frame: usize) -> Box2 {
        let (cx, cy) = self.centers[frame];
        Box2::from_center(cx, cy, 2.0 * self.half, 2.0 * self.half)
    }
}

pub struct SyntheticVideo {
    pub spec: SyntheticSpec,
    /// Ground-truth target box per frame, always within frame bounds.
    pub gt: Vec<Box2>,
    /// Frames in which the target's pixels are absent (inclusive), for the
    /// occluded-segment profile.
    pub occluded_span: Option<(usize, usize)>,
    background: Vec<[f64; 3]>,
    bg_cells: usize,
    target: SquareActor,
    distractors: Vec<SquareActor>,
    tir_noise_seed: u64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const BG_CELL: usize = 16;

/// Straight-line center track that stays inside [margin, size - margin] on
/// both axes for the whole clip.
fn linear_track(
    rng: &mut Rng,
    len: usize,
    size: f64,
    margin: f64,
) -> Vec<(f64, f64)> {
    let span = size - 2.0 * margin;
    let steps = (len - 1) as f64;
    let dir = rng.range(0.0, std::f64::consts::TAU);
    let (dx, dy) = (dir.cos(), dir.sin());
    let cap = |d: f64| {
        if d.abs() < 1e-9 {
            f64::INFINITY
        } else {
            span / (steps * d.abs())
        }
    };
    let speed = rng.range(3.5, 7.0).min(cap(dx)).min(cap(dy));
    let (vx, vy) = (speed * dx, speed * dy);
    let sx = if vx >= 0.0 {
        rng.range(margin, size - margin - vx * steps)
    } else {
        rng.range(margin - vx * steps, size - margin)
    };
    let sy = if vy >= 0.0 {
        rng.range(margin, size - margin - vy * steps)
    } else {
        rng.range(margin - vy * steps, size - margin)
    };
    (0..len)
        .map(|t| (sx + vx * t as f64, sy + vy * t as f64))
        .collect()
}

/// Bouncing track for distractors (reflection keeps it in-bounds).
fn bouncing_track(rng: &mut Rng, len: usize, size: f64, margin: f64) -> Vec<(f64, f64)> {
    let mut x = rng.range(margin, size - margin);
    let mut y = rng.range(margin, size - margin);
    let dir = rng.range(0.0, std::f64::consts::TAU);
    let speed = rng.range(2.0, 5.0);
    let mut vx = speed * dir.cos();
    let mut vy = speed * dir.sin();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push((x, y));
        x += vx;
        y += vy;
        if x < margin || x > size - margin {
            vx = -vx;
            x = x.clamp(margin, size - margin);
        }
        if y < margin || y > size - margin {
            vy = -vy;
            y = y.clamp(margin, size - margin);
        }
    }
    out
}

pub fn generate_synthetic_video(spec: &SyntheticSpec) -> Result<SyntheticVideo, SynthError> {
    if spec.len < 2 {
        return Err(SynthError::TooShort { len: spec.len });
    }
    let size = spec.frame_size as f64;
    let base = Rng::new(spec.seed);

    let mut bg_rng = base.fork(0xB6);
    let bg_cells = spec.frame_size / BG_CELL + 2;
    let background: Vec<[f64; 3]> = (0..bg_cells * bg_cells)
        .map(|_| {
            let v = bg_rng.range(0.32, 0.58);
            [
                (v + bg_rng.range(-0.04, 0.04)).clamp(0.0, 1.0),
                (v + bg_rng.range(-0.04, 0.04)).clamp(0.0, 1.0),
                (v + bg_rng.range(-0.04, 0.04)).clamp(0.0, 1.0),
            ]
        })
        .collect();

    let mut target_rng = base.fork(0xB7);
    let half = target_rng.range(13.0, 19.0);
    let margin = half + 6.0;
    let hue = target_rng.next_f64();
    let centers = match spec.profile {
        MotionProfile::Linear | MotionProfile::OccludedSegment => {
            linear_track(&mut target_rng, spec.len, size, margin)
        }
        MotionProfile::Sinusoidal => {
            let base_track = linear_track(&mut target_rng, spec.len, size, margin + 50.0);
            let amp = target_rng.range(25.0, 45.0);
            let freq = std::f64::consts::TAU / target_rng.range(20.0, 32.0);
            let phase = target_rng.range(0.0, std::f64::consts::TAU);
            base_track
                .iter()
                .enumerate()
                .map(|(t, (x, y))| (*x, y + amp * (freq * t as f64 + phase).sin()))
                .collect()
        }
    };
    let target = SquareActor {
        centers,
        half,
        color: hsv_to_rgb(hue, 0.8, 0.9),
        checker: 0.08,
        tir: 1.0,
    };

    let mut dis_rng = base.fork(0xB8);
    let distractors: Vec<SquareActor> = (0..spec.distractors)
        .map(|_| {
            let dh = dis_rng.range(-0.03, 0.03);
            let c = hsv_to_rgb((hue + dh).rem_euclid(1.0), 0.75, 0.88);
            SquareActor {
                centers: bouncing_track(&mut dis_rng, spec.len, size, half + 4.0),
                half: half + dis_rng.range(-3.0, 3.0),
                color: c,
                checker: 0.08,
                tir: 0.55,
            }
        })
        .collect();

    // a span needs room before and after it; shorter clips degrade to plain
    // linear motion
    let occluded_span = match spec.profile {
        MotionProfile::OccludedSegment if spec.len >= 16 => {
            let mut occ_rng = base.fork(0xB9);
            let dur = (spec.len / 4).max(4);
            let a = (spec.len * 2 / 5 + occ_rng.below(3)).min(spec.len - dur - 4);
            Some((a, a + dur))
        }
        _ => None,
    };

    let gt = (0..spec.len).map(|t| target.boxed(t)).collect();

    Ok(SyntheticVideo {
        spec: *spec,
        gt,
        occluded_span,
        background,
        bg_cells,
        target,
        distractors,
        tir_noise_seed: base.fork(0xBA).next_u64(),
    })
}

impl SyntheticVideo {
    pub fn len(&self) -> usize {
        self.spec.len
    }

    pub fn is_empty(&self) -> bool {
        self.spec.len == 0
    }

    pub fn frame_size(&self) -> usize {
        self.spec.frame_size
    }

    pub fn target_visible(&self, frame: usize) -> bool {
        match self.occluded_span {
            Some((a, b)) => frame < a || frame > b,
            None => true,
        }
    }

    fn bg_at(&self, y: f64, x: f64) -> [f64; 3] {
        let gx = x / BG_CELL as f64;
        let gy = y / BG_CELL as f64;
        let x0 = (gx.floor() as usize).min(self.bg_cells - 2);
        let y0 = (gy.floor() as usize).min(self.bg_cells - 2);
        let fx = (gx - x0 as f64).clamp(0.0, 1.0);
        let fy = (gy - y0 as f64).clamp(0.0, 1.0);
        let at = |yy: usize, xx: usize| self.background[yy * self.bg_cells + xx];
        let mut out = [0.0; 3];
        for c in 0..3 {
            let top = at(y0, x0)[c] * (1.0 - fx) + at(y0, x0 + 1)[c] * fx;
            let bot = at(y0 + 1, x0)[c] * (1.0 - fx) + at(y0 + 1, x0 + 1)[c] * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    fn paint_actor(rgb: &mut Image, tir: &mut Image, actor: &SquareActor, frame: usize) {
        let b = actor.boxed(frame);
        let size = rgb.w;
        let x_lo = b.x_min.floor().max(0.0) as usize;
        let x_hi = (b.x_max.ceil() as usize).min(size);
        let y_lo = b.y_min.floor().max(0.0) as usize;
        let y_hi = (b.y_max.ceil() as usize).min(size);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                let px = x as f64 + 0.5;
                let py = y as f64 + 0.5;
                if px < b.x_min || px >= b.x_max || py < b.y_min || py >= b.y_max {
                    continue;
                }
                // checker pattern anchored to the actor so its appearance is
                // stable as it moves
                let lx = ((px - b.x_min) / 8.0).floor() as i64;
                let ly = ((py - b.y_min) / 8.0).floor() as i64;
                let mod_ = if (lx + ly) % 2 == 0 {
                    actor.checker
                } else {
                    -actor.checker
                };
                for c in 0..3 {
                    rgb.set(c, y, x, (actor.color[c] + mod_).clamp(0.0, 1.0));
                }
                let tv = (actor.tir + 0.5 * mod_).clamp(0.0, 1.0);
                for c in 0..3 {
                    tir.set(c, y, x, tv);
                }
            }
        }
    }

    /// Renders frame `i` deterministically.
    pub fn frame(&self, i: usize) -> (Image, Image) {
        assert!(i < self.spec.len);
        let size = self.spec.frame_size;
        let mut rgb = Image::zeros(size, size, 3);
        let mut tir = Image::zeros(size, size, 3);
        let mut noise = Rng::new(self.tir_noise_seed ^ (i as u64).wrapping_mul(0x9E3779B9));
        for y in 0..size {
            for x in 0..size {
                let bg = self.bg_at(y as f64 + 0.5, x as f64 + 0.5);
                for c in 0..3 {
                    rgb.set(c, y, x, bg[c]);
                }
                let tv = 0.08 + 0.06 * noise.next_f64();
                for c in 0..3 {
                    tir.set(c, y, x, tv);
                }
            }
        }
        for d in &self.distractors {
            Self::paint_actor(&mut rgb, &mut tir, d, i);
        }
        if self.target_visible(i) {
            Self::paint_actor(&mut rgb, &mut tir, &self.target, i);
        }
        (rgb, tir)
    }
}

// ---------------------------------------------------------------------------
// directory-of-frames manifest
// ---------------------------------------------------------------------------

/// Writes `manifest.txt`, per-frame raw image pairs under `frames/` and the
/// full ground truth as `gt.csv`.
pub fn write_video_dir(video: &SyntheticVideo, dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir.join("frames"))?;
    let mut manifest = String::new();
    manifest.push_str("version 1\n");
    manifest.push_str(&format!("frames {}\n", video.len()));
    manifest.push_str(&format!("width {}\n", video.frame_size()));
    manifest.push_str(&format!("height {}\n", video.frame_size()));
    let g0 = video.gt[0];
    manifest.push_str(&format!(
        "init_box {:.6} {:.6} {:.6} {:.6}\n",
        g0.x_min, g0.y_min, g0.x_max, g0.y_max
    ));
    for i in 0..video.len() {
        let rgb_rel = format!("frames/rgb_{i:05}.raw");
        let tir_rel = format!("frames/tir_{i:05}.raw");
        let (rgb, tir) = video.frame(i);
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&rgb_rel))?);
        rgb.write_raw_u8(&mut f)?;
        f.flush()?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(&tir_rel))?);
        tir.write_raw_u8(&mut f)?;
        f.flush()?;
        manifest.push_str(&format!("frame {i} {rgb_rel} {tir_rel}\n"));
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;

    let rows: Vec<(u64, Box2)> = video
        .gt
        .iter()
        .enumerate()
        .map(|(i, b)| (i as u64, *b))
        .collect();
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("gt.csv"))?);
    metrics::write_gt_csv(&mut f, &rows).map_err(SynthError::Metrics)?;
    f.flush()?;
    Ok(())
}

/// Parsed manifest: frame file pairs plus the frame-0 ground truth box.
pub struct VideoManifest {
    pub dir: std::path::PathBuf,
    pub frames: Vec<(String, String)>,
    pub width: usize,
    pub height: usize,
    pub init_box: Box2,
}

impl VideoManifest {
    /// Loads one frame pair; frames stream one at a time.
    pub fn load_frame(&self, i: usize) -> Result<(Image, Image), SynthError> {
        let (rgb_rel, tir_rel) = &self.frames[i];
        let mut f = std::io::BufReader::new(std::fs::File::open(self.dir.join(rgb_rel))?);
        let rgb = Image::read_raw(&mut f)?;
        let mut f = std::io::BufReader::new(std::fs::File::open(self.dir.join(tir_rel))?);
        let tir = Image::read_raw(&mut f)?;
        Ok((rgb, tir))
    }
}

pub fn read_video_manifest(dir: &Path) -> Result<VideoManifest, SynthError> {
    let text = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut frames = Vec::new();
    let mut width = 0;
    let mut height = 0;
    let mut init_box = None;
    let mut declared = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let bad = |msg: &str| SynthError::BadManifest {
            line: ln + 1,
            msg: msg.to_string(),
        };
        let mut it = line.split_whitespace();
        match it.next() {
            Some("version") => {
                if it.next() != Some("1") {
                    return Err(bad("unsupported version"));
                }
            }
            Some("frames") => {
                declared = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad frame count"))?
            }
            Some("width") => {
                width = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad width"))?
            }
            Some("height") => {
                height = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("bad height"))?
            }
            Some("init_box") => {
                let mut c = [0.0; 4];
                for v in c.iter_mut() {
                    *v = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| bad("bad init_box"))?;
                }
                init_box = Some(Box2::new(c[0], c[1], c[2], c[3]));
            }
            Some("frame") => {
                let _idx = it.next().ok_or_else(|| bad("missing frame index"))?;
                let rgb = it.next().ok_or_else(|| bad("missing rgb path"))?;
                let tir = it.next().ok_or_else(|| bad("missing tir path"))?;
                frames.push((rgb.to_string(), tir.to_string()));
            }
            Some(other) => {
                return Err(bad(&format!("unknown key {other}")));
            }
            None => {}
        }
    }
    if frames.len() != declared {
        return Err(SynthError::BadManifest {
            line: 0,
            msg: format!("declared {declared} frames, listed {}", frames.len()),
        });
    }
    Ok(VideoManifest {
        dir: dir.to_path_buf(),
        frames,
        width,
        height,
        init_box: init_box.ok_or(SynthError::BadManifest {
            line: 0,
            msg: "missing init_box".into(),
        })?,
    })
}
