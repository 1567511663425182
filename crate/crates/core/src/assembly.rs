//! Converts images and historical boxes into one token sequence: patch
//! embedding, learnable positional tables, a dilated coordinate vocabulary,
//! and the concatenation / scan-order variants. Every emitted sequence
//! records the permutation back to the canonical (tsts, spatial) layout so
//! downstream consumers can locate tokens regardless of the variant.
//!
//! Raw image file format (little-endian):
//!
//! ```text
//! magic    4 bytes   b"RAWA"
//! version  u32       1
//! dtype    u8        0 = u8 (value/255), 1 = f32
//! height   u32
//! width    u32
//! channels u32
//! data     planar channel-major: channels * height * width values
//! ```

use std::io::{Read, Write};

use crate::geom::Box2;
use crate::rng::Rng;
use crate::tensor::{Linear, LinearGrads, Mat};

#[derive(Debug)]
pub enum AssemblyError {
    IndivisibleImage {
        h: usize,
        w: usize,
        patch: usize,
    },
    ChannelMismatch {
        expected: usize,
        got: usize,
    },
    CountMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    BinOutOfRange {
        bin: usize,
        nbins: usize,
    },
    TooManyPromptBoxes {
        got: usize,
        capacity: usize,
    },
    BadVocabulary(&'static str),
    UnknownMode(String),
    Io(std::io::Error),
    BadRawFile(&'static str),
}

impl std::fmt::Display for AssemblyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AssemblyError::IndivisibleImage { h, w, patch } => {
                write!(f, "image {h}x{w} not divisible by patch size {patch}")
            }
            AssemblyError::ChannelMismatch { expected, got } => {
                write!(f, "expected {expected} channels, got {got}")
            }
            AssemblyError::CountMismatch {
                what,
                expected,
                got,
            } => write!(f, "{what}: expected {expected}, got {got}"),
            AssemblyError::BinOutOfRange { bin, nbins } => {
                write!(f, "bin {bin} outside [1, {nbins}]")
            }
            AssemblyError::TooManyPromptBoxes { got, capacity } => {
                write!(f, "{got} prompt boxes exceed capacity {capacity}")
            }
            AssemblyError::BadVocabulary(msg) => write!(f, "bad vocabulary: {msg}"),
            AssemblyError::UnknownMode(s) => write!(f, "unknown mode: {s}"),
            AssemblyError::Io(e) => write!(f, "io error: {e}"),
            AssemblyError::BadRawFile(msg) => write!(f, "bad raw image file: {msg}"),
        }
    }
}

impl std::error::Error for AssemblyError {}

impl From<std::io::Error> for AssemblyError {
    fn from(e: std::io::Error) -> Self {
        AssemblyError::Io(e)
    }
}

// ---------------------------------------------------------------------------
// images
// ---------------------------------------------------------------------------

/// Planar float image, values nominally in [0, 1]. data[c*h*w + y*w + x].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Image {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    #[inline(always)]
    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[ch * self.h * self.w + y * self.w + x]
    }

    #[inline(always)]
    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f64) {
        self.data[ch * self.h * self.w + y * self.w + x] = v;
    }

    /// Bilinear sample with edge-replicate padding at fractional pixel
    /// coordinates (fy, fx) measured in pixel centers.
    pub fn sample(&self, ch: usize, fy: f64, fx: f64) -> f64 {
        let cl = |v: f64, hi: usize| v.clamp(0.0, (hi - 1) as f64);
        let fy = cl(fy, self.h);
        let fx = cl(fx, self.w);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.h - 1);
        let x1 = (x0 + 1).min(self.w - 1);
        let dy = fy - y0 as f64;
        let dx = fx - x0 as f64;
        let v00 = self.get(ch, y0, x0);
        let v01 = self.get(ch, y0, x1);
        let v10 = self.get(ch, y1, x0);
        let v11 = self.get(ch, y1, x1);
        v00 * (1.0 - dy) * (1.0 - dx)
            + v01 * (1.0 - dy) * dx
            + v10 * dy * (1.0 - dx)
            + v11 * dy * dx
    }

    pub fn write_raw_u8(&self, w: &mut impl Write) -> Result<(), AssemblyError> {
        w.write_all(b"RAWA")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&[0u8])?;
        w.write_all(&(self.h as u32).to_le_bytes())?;
        w.write_all(&(self.w as u32).to_le_bytes())?;
        w.write_all(&(self.c as u32).to_le_bytes())?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_raw(r: &mut impl Read) -> Result<Image, AssemblyError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"RAWA" {
            return Err(AssemblyError::BadRawFile("magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != 1 {
            return Err(AssemblyError::BadRawFile("version"));
        }
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        r.read_exact(&mut u32buf)?;
        let h = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let w = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let c = u32::from_le_bytes(u32buf) as usize;
        let count = h * w * c;
        let data = match dtype[0] {
            0 => {
                let mut bytes = vec![0u8; count];
                r.read_exact(&mut bytes)?;
                bytes.iter().map(|b| *b as f64 / 255.0).collect()
            }
            1 => {
                let mut bytes = vec![0u8; count * 4];
                r.read_exact(&mut bytes)?;
                bytes
                    .chunks_exact(4)
                    .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]) as f64)
                    .collect()
            }
            _ => return Err(AssemblyError::BadRawFile("dtype")),
        };
        Ok(Image { h, w, c, data })
    }
}

// ---------------------------------------------------------------------------
// patch embedding
// ---------------------------------------------------------------------------

/// Affine map from flattened P x P x channels patches to D-vectors, applied
/// on a non-overlapping grid in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedParams {
    pub patch: usize,
    pub channels: usize,
    pub proj: Linear,
}

impl PatchEmbedParams {
    pub fn init(patch: usize, channels: usize, d_model: usize, rng: &mut Rng) -> Self {
        PatchEmbedParams {
            patch,
            channels,
            proj: Linear::init(d_model, patch * patch * channels, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.proj.out_dim()
    }
}

fn flatten_patches(image: &Image, p: &PatchEmbedParams) -> Result<Mat, AssemblyError> {
    if image.c != p.channels {
        return Err(AssemblyError::ChannelMismatch {
            expected: p.channels,
            got: image.c,
        });
    }
    if image.h % p.patch != 0 || image.w % p.patch != 0 {
        return Err(AssemblyError::IndivisibleImage {
            h: image.h,
            w: image.w,
            patch: p.patch,
        });
    }
    let gh = image.h / p.patch;
    let gw = image.w / p.patch;
    let in_dim = p.patch * p.patch * p.channels;
    let mut flat = Mat::zeros(gh * gw, in_dim);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = flat.row_mut(gy * gw + gx);
            let mut i = 0;
            for ch in 0..p.channels {
                for py in 0..p.patch {
                    for px in 0..p.patch {
                        row[i] = image.get(ch, gy * p.patch + py, gx * p.patch + px);
                        i += 1;
                    }
                }
            }
        }
    }
    Ok(flat)
}

/// (H/P)*(W/P) tokens in row-major grid order.
pub fn patch_embed(image: &Image, p: &PatchEmbedParams) -> Result<Mat, AssemblyError> {
    let flat = flatten_patches(image, p)?;
    Ok(p.proj.forward(&flat))
}

/// Accumulates patch-embedding weight gradients for cotangent `d_tokens`.
pub fn patch_embed_backward(
    image: &Image,
    p: &PatchEmbedParams,
    d_tokens: &Mat,
    grads: &mut LinearGrads,
) -> Result<(), AssemblyError> {
    let flat = flatten_patches(image, p)?;
    if d_tokens.rows() != flat.rows() {
        return Err(AssemblyError::CountMismatch {
            what: "patch token cotangent rows",
            expected: flat.rows(),
            got: d_tokens.rows(),
        });
    }
    let _ = p.proj.backward(&flat, d_tokens, grads);
    Ok(())
}

// ---------------------------------------------------------------------------
// positional tables
// ---------------------------------------------------------------------------

/// Smooth positional code shared by the positional tables and the
/// coordinate vocabulary: a plain centered-linear term followed by
/// interleaved sin/cos over a linear frequency ladder. The leading linear
/// term lets downstream layers compare positions with subtraction and
/// rectification alone (no bilinear matching needed); the harmonics add
/// locality. Every table remains learnable afterwards.
pub fn sincos_code(c: f64, dims: usize, scale: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dims);
    if dims == 0 {
        return;
    }
    out[0] = scale * (2.0 * c - 1.0);
    let mut i = 1;
    let mut k = 0;
    while i < dims {
        let omega = std::f64::consts::PI * (k + 1) as f64;
        out[i] = scale * (omega * c).sin();
        if i + 1 < dims {
            out[i + 1] = scale * (omega * c).cos();
        }
        i += 2;
        k += 1;
    }
}

/// 2-d variant: first half of the dims encodes x, second half encodes y.
fn sincos_code_2d(x: f64, y: f64, dims: usize, scale: f64, row: &mut [f64]) {
    let half = dims / 2;
    sincos_code(x, half, scale, &mut row[..half]);
    sincos_code(y, dims - half, scale, &mut row[half..]);
}

/// One table for template tokens (reused across the M template frames and
/// both modalities) and one for search tokens. Initialized with the smooth
/// grid position code plus a small random component that breaks symmetry.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalTables {
    pub template: Mat,
    pub search: Mat,
}

const POS_CODE_SCALE: f64 = 0.5;

fn grid_table(tokens: usize, d_model: usize, rng: &mut Rng) -> Mat {
    let g = (tokens as f64).sqrt().round() as usize;
    let mut table = Mat::random_normal(tokens, d_model, 0.02, rng);
    if g * g == tokens {
        for p in 0..tokens {
            let x = (p % g) as f64 / g as f64 + 0.5 / g as f64;
            let y = (p / g) as f64 / g as f64 + 0.5 / g as f64;
            let mut code = vec![0.0; d_model];
            sincos_code_2d(x, y, d_model, POS_CODE_SCALE, &mut code);
            let row = table.row_mut(p);
            for (r, c) in row.iter_mut().zip(&code) {
                *r += c;
            }
        }
    }
    table
}

impl PositionalTables {
    pub fn init(l_template: usize, l_search: usize, d_model: usize, rng: &mut Rng) -> Self {
        PositionalTables {
            template: grid_table(l_template, d_model, rng),
            search: grid_table(l_search, d_model, rng),
        }
    }
}

/// Element-wise addition of a positional table to a token block.
pub fn add_positional(tokens: &Mat, table: &Mat) -> Result<Mat, AssemblyError> {
    if tokens.rows() != table.rows() || tokens.cols() != table.cols() {
        return Err(AssemblyError::CountMismatch {
            what: "positional table rows",
            expected: table.rows(),
            got: tokens.rows(),
        });
    }
    let mut out = tokens.clone();
    out.add_assign(table);
    Ok(out)
}

// ---------------------------------------------------------------------------
// coordinate vocabulary
// ---------------------------------------------------------------------------

/// The vocabulary covers the dilated range [0.5 - alpha/2, 0.5 + alpha/2],
/// uniformly split into nbins bins indexed from 1.
pub fn discretize_coordinate(c: f64, nbins: usize, alpha: f64) -> usize {
    debug_assert!(nbins >= 2 && alpha >= 1.0);
    let lo = 0.5 - alpha / 2.0;
    let u = ((c - lo) / alpha).clamp(0.0, 1.0);
    ((u * nbins as f64).floor() as usize + 1).min(nbins)
}

/// Center of `bin` mapped back through the dilation.
pub fn dediscretize(bin: usize, nbins: usize, alpha: f64) -> Result<f64, AssemblyError> {
    if bin < 1 || bin > nbins {
        return Err(AssemblyError::BinOutOfRange { bin, nbins });
    }
    let lo = 0.5 - alpha / 2.0;
    let u = (bin as f64 - 0.5) / nbins as f64;
    Ok(lo + u * alpha)
}

/// Coordinate embedding vocabulary plus per-slot order offsets for the
/// 4 * capacity prompt positions and the learnable query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordVocabulary {
    pub nbins: usize,
    pub alpha: f64,
    pub table: Mat,
    pub slot_offsets: Mat,
    pub query_init: Mat,
}

impl CoordVocabulary {
    pub fn init(
        nbins: usize,
        alpha: f64,
        capacity: usize,
        d_model: usize,
        rng: &mut Rng,
    ) -> Result<Self, AssemblyError> {
        if nbins < 2 {
            return Err(AssemblyError::BadVocabulary("nbins must be >= 2"));
        }
        if !(alpha >= 1.0) {
            return Err(AssemblyError::BadVocabulary("alpha must be >= 1"));
        }
        // Coordinate tokens are whole tokens, not additive modifiers, so
        // they start at a scale comparable to embedded image patches, and
        // each bin's row carries the smooth code of its center coordinate
        // in both axis blocks (the per-slot offsets disambiguate which of
        // the four box coordinates a token is). This makes the prompt
        // positions linearly relatable to the search positional code from
        // the start; the table remains fully learnable.
        let mut table = Mat::random_normal(nbins, d_model, 0.05, rng);
        for b in 0..nbins {
            let c = 0.5 - alpha / 2.0 + (b as f64 + 0.5) / nbins as f64 * alpha;
            let half = d_model / 2;
            let mut code = vec![0.0; d_model];
            sincos_code(c, half, 1.0, &mut code[..half]);
            sincos_code(c, d_model - half, 1.0, &mut code[half..]);
            let row = table.row_mut(b);
            for (r, v) in row.iter_mut().zip(&code) {
                *r += v;
            }
        }
        Ok(CoordVocabulary {
            nbins,
            alpha,
            table,
            slot_offsets: Mat::random_normal(4 * capacity, d_model, 0.1, rng),
            query_init: Mat::random_normal(4, d_model, 0.3, rng),
        })
    }

    pub fn capacity(&self) -> usize {
        self.slot_offsets.rows() / 4
    }

    pub fn d_model(&self) -> usize {
        self.table.cols()
    }
}

/// Embedded prompt tokens: 4 coordinate tokens per box plus 4 query tokens.
#[derive(Clone, Debug)]
pub struct PromptTokens {
    pub coord: Mat,
    /// 1-based vocabulary bin per coordinate token.
    pub bins: Vec<usize>,
    /// Slot-offset row used per coordinate token.
    pub slots: Vec<usize>,
    pub query: Mat,
}

/// Boxes are given oldest first and already mapped into the current search
/// coordinate frame. When fewer than `capacity` boxes exist, they occupy the
/// final slot groups so the newest box always sits at the same slots it
/// occupied during training.
pub fn embed_prompts(
    boxes: &[Box2],
    vocab: &CoordVocabulary,
) -> Result<PromptTokens, AssemblyError> {
    let capacity = vocab.capacity();
    if boxes.len() > capacity {
        return Err(AssemblyError::TooManyPromptBoxes {
            got: boxes.len(),
            capacity,
        });
    }
    let d = vocab.d_model();
    let mut coord = Mat::zeros(4 * boxes.len(), d);
    let mut bins = Vec::with_capacity(4 * boxes.len());
    let mut slots = Vec::with_capacity(4 * boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let slot_box = capacity - boxes.len() + i;
        for (j, c) in b.coords().iter().enumerate() {
            let bin = discretize_coordinate(*c, vocab.nbins, vocab.alpha);
            let slot = slot_box * 4 + j;
            let row = coord.row_mut(i * 4 + j);
            for (k, v) in row.iter_mut().enumerate() {
                *v = vocab.table.get(bin - 1, k) + vocab.slot_offsets.get(slot, k);
            }
            bins.push(bin);
            slots.push(slot);
        }
    }
    Ok(PromptTokens {
        coord,
        bins,
        slots,
        query: vocab.query_init.clone(),
    })
}

// ---------------------------------------------------------------------------
// sequence construction
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Template,
    Search,
    Coord,
    Query,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Tir,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TokenTag {
    pub role: Role,
    pub modality: Modality,
    pub frame: u32,
    pub spatial: u32,
}

/// Provenance used by the training backward pass to scatter token
/// cotangents back to their producing parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenSource {
    TemplatePatch {
        slot: usize,
        modality: Modality,
        patch: usize,
    },
    SearchPatch {
        modality: Modality,
        patch: usize,
    },
    Coord {
        /// Index into the prompt token list (box-major).
        index: usize,
        bin: usize,
        slot: usize,
    },
    Query {
        index: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConcatMode {
    Tsts,
    Ttss,
    CrossTs,
}

impl std::str::FromStr for ConcatMode {
    type Err = AssemblyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tsts" => Ok(ConcatMode::Tsts),
            "ttss" => Ok(ConcatMode::Ttss),
            "cross_ts" => Ok(ConcatMode::CrossTs),
            other => Err(AssemblyError::UnknownMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for ConcatMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ConcatMode::Tsts => "tsts",
            ConcatMode::Ttss => "ttss",
            ConcatMode::CrossTs => "cross_ts",
        };
        write!(f, "{s}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanOrder {
    Spatial,
    Temporal,
}

impl std::str::FromStr for ScanOrder {
    type Err = AssemblyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spatial" => Ok(ScanOrder::Spatial),
            "temporal" => Ok(ScanOrder::Temporal),
            other => Err(AssemblyError::UnknownMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for ScanOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScanOrder::Spatial => "spatial",
            ScanOrder::Temporal => "temporal",
        };
        write!(f, "{s}")
    }
}

/// One template frame's embedded tokens for both modalities.
#[derive(Clone, Debug)]
pub struct TemplateTokens {
    pub rgb: Mat,
    pub tir: Mat,
    pub frame_index: u32,
}

/// The assembled sequence. `perm[k]` is the canonical (tsts, spatial)
/// position of the token emitted at position k; applying the inverse
/// restores canonical order exactly.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Mat,
    pub tags: Vec<TokenTag>,
    pub sources: Vec<TokenSource>,
    pub perm: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    /// Tokens and tags restored to canonical (tsts, spatial) order.
    pub fn canonicalize(&self) -> (Mat, Vec<TokenTag>) {
        let d = self.tokens.cols();
        let mut tokens = Mat::zeros(self.tokens.rows(), d);
        let mut tags = vec![self.tags[0]; self.tags.len()];
        for (k, &canon) in self.perm.iter().enumerate() {
            tokens.row_mut(canon).copy_from_slice(self.tokens.row(k));
            tags[canon] = self.tags[k];
        }
        (tokens, tags)
    }

    /// Positions (in emitted order) of tokens matching `role` and
    /// `modality`, sorted by spatial index.
    pub fn positions_of(&self, role: Role, modality: Modality) -> Vec<usize> {
        let mut hits: Vec<(u32, usize)> = self
            .tags
            .iter()
            .enumerate()
            .filter(|(_, t)| t.role == role && t.modality == modality)
            .map(|(i, t)| (t.spatial, i))
            .collect();
        hits.sort_unstable();
        hits.into_iter().map(|(_, i)| i).collect()
    }
}

struct CanonicalToken {
    values: Vec<f64>,
    tag: TokenTag,
    source: TokenSource,
    /// [segment, k1, k2, k3, k4] ordering key under the requested variant.
    key: [u32; 5],
}

fn image_key(
    mode: ConcatMode,
    order: ScanOrder,
    role_rank: u32,
    modality_rank: u32,
    frame_slot: u32,
    spatial: u32,
) -> [u32; 5] {
    let (a, b) = match order {
        ScanOrder::Spatial => (frame_slot, spatial),
        ScanOrder::Temporal => (spatial, frame_slot),
    };
    match mode {
        ConcatMode::Tsts => [0, modality_rank, role_rank, a, b],
        ConcatMode::Ttss => [0, role_rank, modality_rank, a, b],
        ConcatMode::CrossTs => match order {
            ScanOrder::Spatial => [0, role_rank, frame_slot, modality_rank, spatial],
            ScanOrder::Temporal => [0, role_rank, spatial, frame_slot, modality_rank],
        },
    }
}

/// Concatenates template, search and optional prompt tokens into one
/// sequence under the requested concat mode and scan order. All variants
/// emit the same token multiset; only the order differs.
pub fn build_sequence(
    templates: &[TemplateTokens],
    search_rgb: &Mat,
    search_tir: &Mat,
    search_frame: u32,
    prompts: Option<&PromptTokens>,
    mode: ConcatMode,
    order: ScanOrder,
) -> Result<TokenSequence, AssemblyError> {
    if templates.is_empty() {
        return Err(AssemblyError::CountMismatch {
            what: "template frames",
            expected: 1,
            got: 0,
        });
    }
    let d = search_rgb.cols();
    if search_tir.cols() != d || search_tir.rows() != search_rgb.rows() {
        return Err(AssemblyError::CountMismatch {
            what: "search token block",
            expected: search_rgb.rows(),
            got: search_tir.rows(),
        });
    }
    let l_z = templates[0].rgb.rows();
    for t in templates {
        if t.rgb.rows() != l_z || t.tir.rows() != l_z || t.rgb.cols() != d || t.tir.cols() != d {
            return Err(AssemblyError::CountMismatch {
                what: "template token block",
                expected: l_z,
                got: t.rgb.rows(),
            });
        }
    }

    // canonical (tsts, spatial) construction: [t_RGB..., s_RGB, t_TIR..., s_TIR]
    let mut canonical: Vec<CanonicalToken> = Vec::new();
    let m = templates.len() as u32;
    for (modality_rank, modality) in [(0u32, Modality::Rgb), (1u32, Modality::Tir)] {
        for (slot, t) in templates.iter().enumerate() {
            let block = match modality {
                Modality::Rgb => &t.rgb,
                _ => &t.tir,
            };
            for p in 0..block.rows() {
                canonical.push(CanonicalToken {
                    values: block.row(p).to_vec(),
                    tag: TokenTag {
                        role: Role::Template,
                        modality,
                        frame: t.frame_index,
                        spatial: p as u32,
                    },
                    source: TokenSource::TemplatePatch {
                        slot,
                        modality,
                        patch: p,
                    },
                    key: image_key(mode, order, 0, modality_rank, slot as u32, p as u32),
                });
            }
        }
        let block = match modality {
            Modality::Rgb => search_rgb,
            _ => search_tir,
        };
        for p in 0..block.rows() {
            canonical.push(CanonicalToken {
                values: block.row(p).to_vec(),
                tag: TokenTag {
                    role: Role::Search,
                    modality,
                    frame: search_frame,
                    spatial: p as u32,
                },
                source: TokenSource::SearchPatch { modality, patch: p },
                key: image_key(mode, order, 1, modality_rank, m, p as u32),
            });
        }
    }
    if let Some(pr) = prompts {
        if pr.coord.cols() != d || pr.query.cols() != d {
            return Err(AssemblyError::CountMismatch {
                what: "prompt token width",
                expected: d,
                got: pr.coord.cols(),
            });
        }
        for i in 0..pr.coord.rows() {
            canonical.push(CanonicalToken {
                values: pr.coord.row(i).to_vec(),
                tag: TokenTag {
                    role: Role::Coord,
                    modality: Modality::None,
                    frame: search_frame,
                    spatial: i as u32,
                },
                source: TokenSource::Coord {
                    index: i,
                    bin: pr.bins[i],
                    slot: pr.slots[i],
                },
                key: [1, i as u32, 0, 0, 0],
            });
        }
        for i in 0..4 {
            canonical.push(CanonicalToken {
                values: pr.query.row(i).to_vec(),
                tag: TokenTag {
                    role: Role::Query,
                    modality: Modality::None,
                    frame: search_frame,
                    spatial: i as u32,
                },
                source: TokenSource::Query { index: i },
                key: [2, i as u32, 0, 0, 0],
            });
        }
    }

    let mut emit_order: Vec<usize> = (0..canonical.len()).collect();
    emit_order.sort_by_key(|&i| canonical[i].key);

    let mut tokens = Mat::zeros(canonical.len(), d);
    let mut tags = Vec::with_capacity(canonical.len());
    let mut sources = Vec::with_capacity(canonical.len());
    let mut perm = Vec::with_capacity(canonical.len());
    for (k, &ci) in emit_order.iter().enumerate() {
        tokens.row_mut(k).copy_from_slice(&canonical[ci].values);
        tags.push(canonical[ci].tag);
        sources.push(canonical[ci].source);
        perm.push(ci);
    }
    Ok(TokenSequence {
        tokens,
        tags,
        sources,
        perm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts_at_reference_resolutions() {
        let mut rng = Rng::new(0);
        let p = PatchEmbedParams::init(16, 3, 8, &mut rng);
        let img = Image::zeros(128, 128, 3);
        assert_eq!(patch_embed(&img, &p).unwrap().rows(), 64);
        let img = Image::zeros(256, 256, 3);
        assert_eq!(patch_embed(&img, &p).unwrap().rows(), 256);
    }

    #[test]
    fn patch_embed_zero_image_zero_bias() {
        let mut rng = Rng::new(1);
        let p = PatchEmbedParams::init(16, 3, 8, &mut rng);
        let img = Image::zeros(64, 64, 3);
        let tokens = patch_embed(&img, &p).unwrap();
        assert!(tokens.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn patch_embed_rejects_indivisible() {
        let mut rng = Rng::new(2);
        let p = PatchEmbedParams::init(16, 3, 8, &mut rng);
        let img = Image::zeros(100, 128, 3);
        assert!(matches!(
            patch_embed(&img, &p),
            Err(AssemblyError::IndivisibleImage { .. })
        ));
    }

    #[test]
    fn positional_addition_identities() {
        let mut rng = Rng::new(3);
        let tokens = Mat::random_normal(10, 4, 1.0, &mut rng);
        let zero = Mat::zeros(10, 4);
        assert_eq!(add_positional(&tokens, &zero).unwrap(), tokens);

        let table = Mat::random_normal(10, 4, 1.0, &mut rng);
        let from_zero = add_positional(&zero, &table).unwrap();
        assert_eq!(from_zero, table);

        let added = add_positional(&tokens, &table).unwrap();
        let mut neg = table.clone();
        neg.scale(-1.0);
        let back = add_positional(&added, &neg).unwrap();
        for (a, b) in back.as_slice().iter().zip(tokens.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }

        let short = Mat::zeros(9, 4);
        assert!(add_positional(&tokens, &short).is_err());
    }

    #[test]
    fn discretize_boundaries() {
        assert_eq!(discretize_coordinate(0.0, 100, 1.0), 1);
        assert_eq!(discretize_coordinate(1.0, 100, 1.0), 100);
        assert_eq!(discretize_coordinate(-0.5, 100, 2.0), 1);
        assert_eq!(discretize_coordinate(1.5, 100, 2.0), 100);
        assert_eq!(discretize_coordinate(-1e9, 100, 2.0), 1);
        assert_eq!(discretize_coordinate(1e9, 100, 2.0), 100);
    }

    #[test]
    fn discretize_total_on_finite_inputs() {
        let mut rng = Rng::new(4);
        for _ in 0..10_000 {
            let c = rng.range(-7.0, 8.0);
            let bin = discretize_coordinate(c, 400, 2.0);
            assert!((1..=400).contains(&bin));
        }
        for c in [f64::MAX, f64::MIN, -1e308, 1e308] {
            let bin = discretize_coordinate(c, 400, 2.0);
            assert!((1..=400).contains(&bin));
        }
    }

    #[test]
    fn dediscretize_bin_centers() {
        assert!((dediscretize(1, 100, 1.0).unwrap() - 0.005).abs() < 1e-12);
        assert!(dediscretize(0, 100, 1.0).is_err());
        assert!(dediscretize(101, 100, 1.0).is_err());
    }

    #[test]
    fn round_trip_identity_on_bins() {
        for nbins in [10, 100, 400] {
            for alpha in [1.0, 2.0] {
                for bin in 1..=nbins {
                    let c = dediscretize(bin, nbins, alpha).unwrap();
                    assert_eq!(discretize_coordinate(c, nbins, alpha), bin);
                }
            }
        }
    }

    #[test]
    fn round_trip_half_bin_bound() {
        let mut rng = Rng::new(5);
        for &(nbins, alpha) in &[(100usize, 1.0f64), (400, 2.0), (50, 1.5)] {
            let lo = 0.5 - alpha / 2.0;
            let bound = alpha / (2.0 * nbins as f64);
            for _ in 0..5_000 {
                let c = lo + rng.next_f64() * alpha;
                let back = dediscretize(discretize_coordinate(c, nbins, alpha), nbins, alpha)
                    .unwrap();
                assert!(
                    (c - back).abs() <= bound + 1e-12,
                    "roundtrip error {} exceeds {}",
                    (c - back).abs(),
                    bound
                );
            }
        }
    }

    fn test_vocab(capacity: usize) -> CoordVocabulary {
        CoordVocabulary::init(400, 2.0, capacity, 6, &mut Rng::new(9)).unwrap()
    }

    #[test]
    fn prompt_token_counts() {
        let vocab = test_vocab(7);
        let boxes: Vec<Box2> = (0..7)
            .map(|i| Box2::new(0.1 * i as f64, 0.2, 0.1 * i as f64 + 0.3, 0.6))
            .collect();
        let pt = embed_prompts(&boxes, &vocab).unwrap();
        assert_eq!(pt.coord.rows(), 28);
        assert_eq!(pt.query.rows(), 4);
    }

    #[test]
    fn identical_boxes_differ_by_slot_offsets() {
        let vocab = test_vocab(3);
        let b = Box2::new(0.2, 0.2, 0.5, 0.5);
        let pt = embed_prompts(&[b, b], &vocab).unwrap();
        // same coordinate j of box 0 and box 1 differ exactly by the offset delta
        for j in 0..4 {
            for k in 0..vocab.d_model() {
                let diff = pt.coord.get(4 + j, k) - pt.coord.get(j, k);
                let offset_diff =
                    vocab.slot_offsets.get(pt.slots[4 + j], k) - vocab.slot_offsets.get(pt.slots[j], k);
                assert!((diff - offset_diff).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_vocab_zero_coord_tokens() {
        let mut vocab = test_vocab(2);
        vocab.table.fill(0.0);
        vocab.slot_offsets.fill(0.0);
        let pt = embed_prompts(&[Box2::new(0.1, 0.1, 0.4, 0.4)], &vocab).unwrap();
        assert!(pt.coord.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prompt_capacity_enforced() {
        let vocab = test_vocab(1);
        let b = Box2::new(0.0, 0.0, 1.0, 1.0);
        assert!(embed_prompts(&[b, b], &vocab).is_err());
    }

    fn toy_blocks(l_z: usize, l_x: usize, m: usize, d: usize, seed: u64) -> (Vec<TemplateTokens>, Mat, Mat) {
        let mut rng = Rng::new(seed);
        let templates = (0..m)
            .map(|i| TemplateTokens {
                rgb: Mat::random_normal(l_z, d, 1.0, &mut rng),
                tir: Mat::random_normal(l_z, d, 1.0, &mut rng),
                frame_index: i as u32 * 3,
            })
            .collect();
        let search_rgb = Mat::random_normal(l_x, d, 1.0, &mut rng);
        let search_tir = Mat::random_normal(l_x, d, 1.0, &mut rng);
        (templates, search_rgb, search_tir)
    }

    #[test]
    fn sequence_length_law() {
        let (templates, s_rgb, s_tir) = toy_blocks(64, 256, 2, 4, 11);
        for mode in [ConcatMode::Tsts, ConcatMode::Ttss, ConcatMode::CrossTs] {
            let seq =
                build_sequence(&templates, &s_rgb, &s_tir, 9, None, mode, ScanOrder::Spatial)
                    .unwrap();
            assert_eq!(seq.len(), 2 * 2 * 64 + 2 * 256);
        }

        let vocab = CoordVocabulary::init(400, 2.0, 7, 4, &mut Rng::new(2)).unwrap();
        let boxes: Vec<Box2> = (0..7).map(|i| Box2::new(0.0, 0.0, 0.1 + 0.01 * i as f64, 0.2)).collect();
        let prompts = embed_prompts(&boxes, &vocab).unwrap();
        let seq = build_sequence(
            &templates,
            &s_rgb,
            &s_tir,
            9,
            Some(&prompts),
            ConcatMode::Tsts,
            ScanOrder::Spatial,
        )
        .unwrap();
        assert_eq!(seq.len(), 768 + 4 * 7 + 4);
    }

    fn multiset(seq: &TokenSequence) -> Vec<(TokenTag, Vec<u64>)> {
        let mut v: Vec<(TokenTag, Vec<u64>)> = (0..seq.len())
            .map(|i| {
                (
                    seq.tags[i],
                    seq.tokens.row(i).iter().map(|x| x.to_bits()).collect(),
                )
            })
            .collect();
        v.sort_by(|a, b| format!("{:?}", a).cmp(&format!("{:?}", b)));
        v
    }

    #[test]
    fn variants_are_permutations_and_invert() {
        let (templates, s_rgb, s_tir) = toy_blocks(4, 6, 3, 5, 13);
        let vocab = CoordVocabulary::init(100, 2.0, 2, 5, &mut Rng::new(3)).unwrap();
        let prompts = embed_prompts(
            &[Box2::new(0.1, 0.1, 0.3, 0.3), Box2::new(0.2, 0.2, 0.4, 0.4)],
            &vocab,
        )
        .unwrap();

        let canonical = build_sequence(
            &templates,
            &s_rgb,
            &s_tir,
            7,
            Some(&prompts),
            ConcatMode::Tsts,
            ScanOrder::Spatial,
        )
        .unwrap();
        // canonical variant must be the identity permutation
        assert!(canonical.perm.iter().enumerate().all(|(i, &p)| i == p));

        let reference = multiset(&canonical);
        for mode in [ConcatMode::Tsts, ConcatMode::Ttss, ConcatMode::CrossTs] {
            for order in [ScanOrder::Spatial, ScanOrder::Temporal] {
                let seq = build_sequence(
                    &templates,
                    &s_rgb,
                    &s_tir,
                    7,
                    Some(&prompts),
                    mode,
                    order,
                )
                .unwrap();
                assert_eq!(multiset(&seq), reference, "{mode}/{order} multiset");

                let (tokens, tags) = seq.canonicalize();
                assert_eq!(tokens, canonical.tokens, "{mode}/{order} inverse perm");
                assert_eq!(tags, canonical.tags);
            }
        }
    }

    #[test]
    fn spatial_vs_temporal_template_order() {
        // 2 frames x 2 tokens: spatial (f1p1,f1p2,f2p1,f2p2) vs temporal
        // (f1p1,f2p1,f1p2,f2p2)
        let (templates, s_rgb, s_tir) = toy_blocks(2, 1, 2, 3, 17);
        let spatial = build_sequence(
            &templates,
            &s_rgb,
            &s_tir,
            5,
            None,
            ConcatMode::Tsts,
            ScanOrder::Spatial,
        )
        .unwrap();
        let temporal = build_sequence(
            &templates,
            &s_rgb,
            &s_tir,
            5,
            None,
            ConcatMode::Tsts,
            ScanOrder::Temporal,
        )
        .unwrap();
        let key = |t: &TokenTag| (t.frame, t.spatial);
        let rgb_t: Vec<_> = spatial
            .tags
            .iter()
            .filter(|t| t.role == Role::Template && t.modality == Modality::Rgb)
            .map(key)
            .collect();
        assert_eq!(rgb_t, vec![(0, 0), (0, 1), (3, 0), (3, 1)]);
        let rgb_t: Vec<_> = temporal
            .tags
            .iter()
            .filter(|t| t.role == Role::Template && t.modality == Modality::Rgb)
            .map(key)
            .collect();
        assert_eq!(rgb_t, vec![(0, 0), (3, 0), (0, 1), (3, 1)]);
    }

    #[test]
    fn raw_image_round_trip() {
        let mut rng = Rng::new(19);
        let mut img = Image::zeros(8, 6, 3);
        for v in img.data.iter_mut() {
            *v = rng.next_f64();
        }
        let mut buf = Vec::new();
        img.write_raw_u8(&mut buf).unwrap();
        let back = Image::read_raw(&mut buf.as_slice()).unwrap();
        assert_eq!(back.h, 8);
        assert_eq!(back.w, 6);
        assert_eq!(back.c, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
