//! Center-based prediction head over the fused search grid, plus the
//! auxiliary coordinate-query readout.
//!
//! Feature maps are stored channels x (G*G), row-major per channel. The head
//! is a small conv / channel-norm / ReLU trunk with 1x1 projections to a
//! score map, a sub-cell offset map (sigmoid - 0.5, so zero logits decode to
//! the cell center) and a size map (sigmoid).

use crate::geom::Box2;
use crate::num::sigmoid;
use crate::rng::Rng;
use crate::tensor::Mat;

/// Minimum normalized box extent after decode clamping.
pub const MIN_BOX_EXTENT: f64 = 1e-4;

const NORM_EPS: f64 = 1e-5;

/// 2-d convolution with same padding on a square G x G grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub out_ch: usize,
    pub in_ch: usize,
    pub k: usize,
    /// out_ch x in_ch x k x k
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Conv2d {
    pub fn init(out_ch: usize, in_ch: usize, k: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / ((in_ch * k * k) as f64).sqrt();
        let w = (0..out_ch * in_ch * k * k)
            .map(|_| rng.trunc_normal(std))
            .collect();
        Conv2d {
            out_ch,
            in_ch,
            k,
            w,
            b: vec![0.0; out_ch],
        }
    }

    #[inline]
    fn wi(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.w[((o * self.in_ch + i) * self.k + ky) * self.k + kx]
    }

    pub fn forward(&self, x: &Mat, g: usize) -> Mat {
        assert_eq!(x.rows(), self.in_ch);
        assert_eq!(x.cols(), g * g);
        let pad = self.k / 2;
        let mut out = Mat::zeros(self.out_ch, g * g);
        for o in 0..self.out_ch {
            let orow = out.row_mut(o);
            for y in 0..g {
                for xx in 0..g {
                    let mut acc = self.b[o];
                    for i in 0..self.in_ch {
                        let xrow = x.row(i);
                        for ky in 0..self.k {
                            let sy = y as isize + ky as isize - pad as isize;
                            if sy < 0 || sy >= g as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sx < 0 || sx >= g as isize {
                                    continue;
                                }
                                acc += self.wi(o, i, ky, kx) * xrow[sy as usize * g + sx as usize];
                            }
                        }
                    }
                    orow[y * g + xx] = acc;
                }
            }
        }
        out
    }

    pub fn backward(&self, x: &Mat, g: usize, d_out: &Mat, grads: &mut Conv2dGrads) -> Mat {
        let pad = self.k / 2;
        let mut d_x = Mat::zeros(self.in_ch, g * g);
        for o in 0..self.out_ch {
            let grow = d_out.row(o);
            for y in 0..g {
                for xx in 0..g {
                    let gv = grow[y * g + xx];
                    if gv == 0.0 {
                        continue;
                    }
                    grads.b[o] += gv;
                    for i in 0..self.in_ch {
                        for ky in 0..self.k {
                            let sy = y as isize + ky as isize - pad as isize;
                            if sy < 0 || sy >= g as isize {
                                continue;
                            }
                            for kx in 0..self.k {
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sx < 0 || sx >= g as isize {
                                    continue;
                                }
                                let widx =
                                    ((o * self.in_ch + i) * self.k + ky) * self.k + kx;
                                let src = sy as usize * g + sx as usize;
                                grads.w[widx] += gv * x.get(i, src);
                                d_x.add_at(i, src, gv * self.w[widx]);
                            }
                        }
                    }
                }
            }
        }
        d_x
    }
}

impl Conv2dGrads {
    pub fn zeros_like(c: &Conv2d) -> Self {
        Conv2dGrads {
            w: vec![0.0; c.w.len()],
            b: vec![0.0; c.b.len()],
        }
    }
}

/// Per-channel RMS normalization over spatial positions with a learned
/// per-channel scale. Zero input stays zero.
fn channel_norm(x: &Mat, gamma: &[f64]) -> (Mat, Vec<f64>) {
    let n = x.cols() as f64;
    let mut out = Mat::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for c in 0..x.rows() {
        let row = x.row(c);
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / n;
        let r = 1.0 / (mean_sq + NORM_EPS).sqrt();
        inv.push(r);
        let o = out.row_mut(c);
        for (i, v) in row.iter().enumerate() {
            o[i] = v * r * gamma[c];
        }
    }
    (out, inv)
}

fn channel_norm_backward(
    x: &Mat,
    gamma: &[f64],
    inv: &[f64],
    d_out: &Mat,
    d_gamma: &mut [f64],
) -> Mat {
    let n = x.cols() as f64;
    let mut d_x = Mat::zeros(x.rows(), x.cols());
    for c in 0..x.rows() {
        let r = inv[c];
        let row = x.row(c);
        let g = d_out.row(c);
        let mut s = 0.0;
        for i in 0..row.len() {
            s += g[i] * row[i];
            d_gamma[c] += g[i] * row[i] * r;
        }
        s *= gamma[c];
        let dx = d_x.row_mut(c);
        for i in 0..row.len() {
            dx[i] = r * gamma[c] * g[i] - r.powi(3) * row[i] / n * s;
        }
    }
    d_x
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub conv1: Conv2d,
    pub gamma1: Vec<f64>,
    pub conv2: Conv2d,
    pub gamma2: Vec<f64>,
    pub score: Conv2d,
    pub offset: Conv2d,
    pub size: Conv2d,
}

#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub conv1: Conv2dGrads,
    pub gamma1: Vec<f64>,
    pub conv2: Conv2dGrads,
    pub gamma2: Vec<f64>,
    pub score: Conv2dGrads,
    pub offset: Conv2dGrads,
    pub size: Conv2dGrads,
}

impl HeadParams {
    pub fn init(d_model: usize, hidden: usize, rng: &mut Rng) -> Self {
        HeadParams {
            conv1: Conv2d::init(hidden, d_model, 3, rng),
            gamma1: vec![1.0; hidden],
            conv2: Conv2d::init(hidden, hidden, 3, rng),
            gamma2: vec![1.0; hidden],
            score: Conv2d::init(1, hidden, 1, rng),
            offset: Conv2d::init(2, hidden, 1, rng),
            size: Conv2d::init(2, hidden, 1, rng),
        }
    }
}

impl HeadGrads {
    pub fn zeros_like(p: &HeadParams) -> Self {
        HeadGrads {
            conv1: Conv2dGrads::zeros_like(&p.conv1),
            gamma1: vec![0.0; p.gamma1.len()],
            conv2: Conv2dGrads::zeros_like(&p.conv2),
            gamma2: vec![0.0; p.gamma2.len()],
            score: Conv2dGrads::zeros_like(&p.score),
            offset: Conv2dGrads::zeros_like(&p.offset),
            size: Conv2dGrads::zeros_like(&p.size),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    pub g: usize,
    pub input: Mat,
    pub c1: Mat,
    pub n1_inv: Vec<f64>,
    pub n1: Mat,
    pub t1: Mat,
    pub c2: Mat,
    pub n2_inv: Vec<f64>,
    pub n2: Mat,
    pub t2: Mat,
}

/// Raw logit maps; activations are applied by the map accessors.
#[derive(Clone, Debug)]
pub struct HeadMaps {
    pub g: usize,
    pub score_logits: Mat,
    pub offset_logits: Mat,
    pub size_logits: Mat,
}

impl HeadMaps {
    pub fn score_map(&self) -> Vec<f64> {
        self.score_logits.row(0).iter().map(|v| sigmoid(*v)).collect()
    }

    /// Sub-cell offsets in (-0.5, 0.5), x then y channel.
    pub fn offset_map(&self) -> [Vec<f64>; 2] {
        [
            self.offset_logits.row(0).iter().map(|v| sigmoid(*v) - 0.5).collect(),
            self.offset_logits.row(1).iter().map(|v| sigmoid(*v) - 0.5).collect(),
        ]
    }

    /// Normalized extents in (0, 1), width then height channel.
    pub fn size_map(&self) -> [Vec<f64>; 2] {
        [
            self.size_logits.row(0).iter().map(|v| sigmoid(*v)).collect(),
            self.size_logits.row(1).iter().map(|v| sigmoid(*v)).collect(),
        ]
    }
}

pub fn head_forward(p: &HeadParams, input: &Mat, g: usize) -> (HeadMaps, HeadCache) {
    let c1 = p.conv1.forward(input, g);
    let (n1, n1_inv) = channel_norm(&c1, &p.gamma1);
    let mut t1 = n1.clone();
    t1.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let c2 = p.conv2.forward(&t1, g);
    let (n2, n2_inv) = channel_norm(&c2, &p.gamma2);
    let mut t2 = n2.clone();
    t2.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
    let maps = HeadMaps {
        g,
        score_logits: p.score.forward(&t2, g),
        offset_logits: p.offset.forward(&t2, g),
        size_logits: p.size.forward(&t2, g),
    };
    (
        maps,
        HeadCache {
            g,
            input: input.clone(),
            c1,
            n1_inv,
            n1,
            t1,
            c2,
            n2_inv,
            n2,
            t2,
        },
    )
}

/// Cotangents arrive on the raw logit maps; returns d(input grid feature).
pub fn head_backward(
    p: &HeadParams,
    cache: &HeadCache,
    d_score: &Mat,
    d_offset: &Mat,
    d_size: &Mat,
    grads: &mut HeadGrads,
) -> Mat {
    let g = cache.g;
    let mut d_t2 = p.score.backward(&cache.t2, g, d_score, &mut grads.score);
    d_t2.add_assign(&p.offset.backward(&cache.t2, g, d_offset, &mut grads.offset));
    d_t2.add_assign(&p.size.backward(&cache.t2, g, d_size, &mut grads.size));

    let mut d_n2 = d_t2;
    for (dv, pre) in d_n2.as_mut_slice().iter_mut().zip(cache.n2.as_slice()) {
        if *pre <= 0.0 {
            *dv = 0.0;
        }
    }
    let d_c2 = channel_norm_backward(&cache.c2, &p.gamma2, &cache.n2_inv, &d_n2, &mut grads.gamma2);
    let mut d_t1 = p.conv2.backward(&cache.t1, g, &d_c2, &mut grads.conv2);

    for (dv, pre) in d_t1.as_mut_slice().iter_mut().zip(cache.n1.as_slice()) {
        if *pre <= 0.0 {
            *dv = 0.0;
        }
    }
    let d_c1 = channel_norm_backward(&cache.c1, &p.gamma1, &cache.n1_inv, &d_t1, &mut grads.gamma1);
    p.conv1.backward(&cache.input, g, &d_c1, &mut grads.conv1)
}

/// Activated head maps plus the decoded box and its confidence.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub grid: usize,
    pub score: Vec<f64>,
    pub offset: [Vec<f64>; 2],
    pub size: [Vec<f64>; 2],
    pub decoded: Box2,
    pub confidence: f64,
}

impl HeadOutput {
    pub fn from_maps(maps: &HeadMaps) -> Self {
        let (decoded, confidence) = decode_box(maps);
        HeadOutput {
            grid: maps.g,
            score: maps.score_map(),
            offset: maps.offset_map(),
            size: maps.size_map(),
            decoded,
            confidence,
        }
    }
}

/// Score-map peak and the decoded box. Ties break to the lowest flat index.
/// Zero offset logits place the center at the argmax cell's center.
pub fn decode_box(maps: &HeadMaps) -> (Box2, f64) {
    let g = maps.g;
    let score = maps.score_map();
    let mut best = 0;
    for (i, v) in score.iter().enumerate() {
        if *v > score[best] {
            best = i;
        }
    }
    let (iy, ix) = (best / g, best % g);
    let offset = maps.offset_map();
    let size = maps.size_map();
    let cx = (ix as f64 + 0.5 + offset[0][best]) / g as f64;
    let cy = (iy as f64 + 0.5 + offset[1][best]) / g as f64;
    let b = Box2::from_center(cx, cy, size[0][best], size[1][best]);
    (b.clamp_to(1.0, 1.0, MIN_BOX_EXTENT), score[best])
}

// ---------------------------------------------------------------------------
// query readout
// ---------------------------------------------------------------------------

/// Per-token affine readout of the four query tokens to one scalar each,
/// sigmoid-squashed into the dilated coordinate range
/// [0.5 - alpha/2, 0.5 + alpha/2], ordered (x_min, y_min, x_max, y_max).
#[derive(Clone, Debug, PartialEq)]
pub struct QueryReadout {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct QueryReadoutGrads {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl QueryReadout {
    pub fn init(d_model: usize, rng: &mut Rng) -> Self {
        QueryReadout {
            w: Mat::random_normal(4, d_model, 1.0 / (d_model as f64).sqrt(), rng),
            b: vec![0.0; 4],
        }
    }
}

impl QueryReadoutGrads {
    pub fn zeros_like(q: &QueryReadout) -> Self {
        QueryReadoutGrads {
            w: Mat::zeros(q.w.rows(), q.w.cols()),
            b: vec![0.0; 4],
        }
    }
}

#[derive(Clone, Debug)]
pub struct QueryCache {
    pub raw: [f64; 4],
}

pub fn query_readout(q: &QueryReadout, tokens: &Mat, alpha: f64) -> (Box2, QueryCache) {
    assert_eq!(tokens.rows(), 4, "query readout expects 4 tokens");
    let lo = 0.5 - alpha / 2.0;
    let mut raw = [0.0; 4];
    let mut out = [0.0; 4];
    for i in 0..4 {
        raw[i] = crate::tensor::dot(q.w.row(i), tokens.row(i)) + q.b[i];
        out[i] = lo + sigmoid(raw[i]) * alpha;
    }
    (
        Box2::new(out[0], out[1], out[2], out[3]),
        QueryCache { raw },
    )
}

pub fn query_readout_backward(
    q: &QueryReadout,
    tokens: &Mat,
    cache: &QueryCache,
    d_coords: [f64; 4],
    alpha: f64,
    grads: &mut QueryReadoutGrads,
) -> Mat {
    let mut d_tokens = Mat::zeros(4, tokens.cols());
    for i in 0..4 {
        let s = sigmoid(cache.raw[i]);
        let d_raw = d_coords[i] * alpha * s * (1.0 - s);
        grads.b[i] += d_raw;
        crate::tensor::axpy(grads.w.row_mut(i), d_raw, tokens.row(i));
        crate::tensor::axpy(d_tokens.row_mut(i), d_raw, q.w.row(i));
    }
    d_tokens
}
