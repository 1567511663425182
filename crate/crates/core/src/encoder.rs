//! Bidirectional scan encoder block and the stacked encoder.
//!
//! Per block: RMS-normalize, expand through two linear maps (gate path Z and
//! scan path X), run a causal depthwise convolution + SiLU + selective scan
//! per orientation (the backward orientation reverses the sequence, runs the
//! forward machinery, and reverses back), gate each orientation with
//! SiLU(Z), sum, project back down, and add the residual.
//!
//! Every forward has a matching hand-written backward that accumulates
//! parameter gradients and returns the input cotangent.

use crate::num::{silu, silu_grad};
use crate::rng::Rng;
use crate::ssm::{
    projection_backward, projection_with_cache, selective_scan, selective_scan_backward,
    ProjectionCache, ProjectionGrads, ProjectionWeights, ScanInputs, StateCoefficients,
};
use crate::tensor::{Linear, LinearGrads, Mat};

pub const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub n_state: usize,
    pub conv_width: usize,
    pub layers: usize,
}

impl EncoderDims {
    /// Expansion factor 2, convolution width 4.
    pub fn new(d_model: usize, n_state: usize, layers: usize) -> Self {
        EncoderDims {
            d_model,
            d_inner: 2 * d_model,
            n_state,
            conv_width: 4,
            layers,
        }
    }
}

/// Depthwise causal 1-d convolution parameters: one width-w kernel per
/// channel, stored channels x width with the current tap last.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub kernel: Mat,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub kernel: Mat,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn init(channels: usize, width: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        ConvParams {
            kernel: Mat::random_normal(channels, width, std, rng),
            bias: vec![0.0; channels],
        }
    }
}

impl ConvGrads {
    pub fn zeros_like(p: &ConvParams) -> Self {
        ConvGrads {
            kernel: Mat::zeros(p.kernel.rows(), p.kernel.cols()),
            bias: vec![0.0; p.bias.len()],
        }
    }
}

/// Per-orientation selective scan parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct S6Params {
    pub a: StateCoefficients,
    pub proj: ProjectionWeights,
}

#[derive(Clone, Debug)]
pub struct S6Grads {
    pub a_log: Mat,
    pub proj: ProjectionGrads,
}

impl S6Params {
    pub fn init(d_inner: usize, n_state: usize, rng: &mut Rng) -> Self {
        S6Params {
            a: StateCoefficients::default_init(d_inner, n_state),
            proj: ProjectionWeights::init(d_inner, n_state, rng),
        }
    }
}

impl S6Grads {
    pub fn zeros_like(p: &S6Params) -> Self {
        S6Grads {
            a_log: Mat::zeros(p.a.channels(), p.a.state_dim()),
            proj: ProjectionGrads::zeros_like(&p.proj),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub rms_weight: Vec<f64>,
    pub up_z: Linear,
    pub up_x: Linear,
    pub conv_fwd: ConvParams,
    pub conv_bwd: ConvParams,
    pub s6_fwd: S6Params,
    pub s6_bwd: S6Params,
    pub down: Linear,
}

#[derive(Clone, Debug)]
pub struct BlockGrads {
    pub rms_weight: Vec<f64>,
    pub up_z: LinearGrads,
    pub up_x: LinearGrads,
    pub conv_fwd: ConvGrads,
    pub conv_bwd: ConvGrads,
    pub s6_fwd: S6Grads,
    pub s6_bwd: S6Grads,
    pub down: LinearGrads,
}

impl BlockParams {
    pub fn init(dims: &EncoderDims, rng: &mut Rng) -> Self {
        BlockParams {
            rms_weight: vec![1.0; dims.d_model],
            up_z: Linear::init(dims.d_inner, dims.d_model, rng),
            up_x: Linear::init(dims.d_inner, dims.d_model, rng),
            conv_fwd: ConvParams::init(dims.d_inner, dims.conv_width, rng),
            conv_bwd: ConvParams::init(dims.d_inner, dims.conv_width, rng),
            s6_fwd: S6Params::init(dims.d_inner, dims.n_state, rng),
            s6_bwd: S6Params::init(dims.d_inner, dims.n_state, rng),
            down: Linear::init(dims.d_model, dims.d_inner, rng),
        }
    }

    /// All biases zeroed; used by the zero fixed-point tests.
    pub fn zero_biases(&mut self) {
        self.up_z.b.iter_mut().for_each(|v| *v = 0.0);
        self.up_x.b.iter_mut().for_each(|v| *v = 0.0);
        self.conv_fwd.bias.iter_mut().for_each(|v| *v = 0.0);
        self.conv_bwd.bias.iter_mut().for_each(|v| *v = 0.0);
        self.s6_fwd.proj.delta.b.iter_mut().for_each(|v| *v = 0.0);
        self.s6_fwd.proj.b.b.iter_mut().for_each(|v| *v = 0.0);
        self.s6_fwd.proj.c.b.iter_mut().for_each(|v| *v = 0.0);
        self.s6_bwd.proj.delta.b.iter_mut().for_each(|v| *v = 0.0);
        self.s6_bwd.proj.b.b.iter_mut().for_each(|v| *v = 0.0);
        self.s6_bwd.proj.c.b.iter_mut().for_each(|v| *v = 0.0);
        self.down.b.iter_mut().for_each(|v| *v = 0.0);
    }
}

impl BlockGrads {
    pub fn zeros_like(p: &BlockParams) -> Self {
        BlockGrads {
            rms_weight: vec![0.0; p.rms_weight.len()],
            up_z: LinearGrads::zeros_like(&p.up_z),
            up_x: LinearGrads::zeros_like(&p.up_x),
            conv_fwd: ConvGrads::zeros_like(&p.conv_fwd),
            conv_bwd: ConvGrads::zeros_like(&p.conv_bwd),
            s6_fwd: S6Grads::zeros_like(&p.s6_fwd),
            s6_bwd: S6Grads::zeros_like(&p.s6_bwd),
            down: LinearGrads::zeros_like(&p.down),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub layers: Vec<BlockParams>,
}

#[derive(Clone, Debug)]
pub struct EncoderGrads {
    pub layers: Vec<BlockGrads>,
}

impl EncoderParams {
    pub fn zeros_grads(&self) -> EncoderGrads {
        EncoderGrads {
            layers: self.layers.iter().map(BlockGrads::zeros_like).collect(),
        }
    }
}

/// Deterministic seeded initialization: truncated-normal projections scaled
/// by 1/sqrt(fan_in), state coefficients at -(n+1), zero biases except the
/// delta path whose bias targets softplus output in [0.01, 0.1].
pub fn init_params(seed: u64, dims: EncoderDims) -> EncoderParams {
    let base = Rng::new(seed);
    let layers = (0..dims.layers)
        .map(|i| {
            let mut rng = base.fork(0x1000 + i as u64);
            BlockParams::init(&dims, &mut rng)
        })
        .collect();
    EncoderParams { dims, layers }
}

/// out[t,d] = v[t,d] / sqrt(mean_d(v[t,.]^2) + eps) * weight[d]
pub fn rms_norm(v: &Mat, weight: &[f64], eps: f64) -> Mat {
    rms_norm_with_cache(v, weight, eps).0
}

pub fn rms_norm_with_cache(v: &Mat, weight: &[f64], eps: f64) -> (Mat, Vec<f64>) {
    assert!(eps > 0.0);
    assert_eq!(v.cols(), weight.len(), "rms weight width mismatch");
    let d = v.cols() as f64;
    let mut out = Mat::zeros(v.rows(), v.cols());
    let mut inv = Vec::with_capacity(v.rows());
    for t in 0..v.rows() {
        let row = v.row(t);
        let mean_sq = row.iter().map(|x| x * x).sum::<f64>() / d;
        let r = 1.0 / (mean_sq + eps).sqrt();
        inv.push(r);
        let o = out.row_mut(t);
        for (i, (x, w)) in row.iter().zip(weight).enumerate() {
            o[i] = x * r * w;
        }
    }
    (out, inv)
}

pub fn rms_norm_backward(
    v: &Mat,
    weight: &[f64],
    inv: &[f64],
    d_out: &Mat,
    d_weight: &mut [f64],
) -> Mat {
    let d = v.cols() as f64;
    let mut d_v = Mat::zeros(v.rows(), v.cols());
    for t in 0..v.rows() {
        let r = inv[t];
        let row = v.row(t);
        let g = d_out.row(t);
        let mut s = 0.0;
        for i in 0..row.len() {
            s += g[i] * weight[i] * row[i];
            d_weight[i] += g[i] * row[i] * r;
        }
        let dv = d_v.row_mut(t);
        for i in 0..row.len() {
            dv[i] = r * weight[i] * g[i] - r.powi(3) * row[i] / d * s;
        }
    }
    d_v
}

/// Depthwise causal convolution; position t sees inputs t-w+1..t with zero
/// left padding, so the output never depends on future positions.
pub fn causal_conv1d(x: &Mat, kernel: &Mat, bias: &[f64]) -> Mat {
    let (l, c) = (x.rows(), x.cols());
    let w = kernel.cols();
    assert!(w >= 1);
    assert_eq!(kernel.rows(), c, "conv kernel channel mismatch");
    assert_eq!(bias.len(), c, "conv bias channel mismatch");
    let mut out = Mat::zeros(l, c);
    for t in 0..l {
        let o = out.row_mut(t);
        for ci in 0..c {
            let krow = kernel.row(ci);
            let mut acc = bias[ci];
            for (k, kv) in krow.iter().enumerate() {
                let src = t as isize - (w as isize - 1) + k as isize;
                if src >= 0 {
                    acc += kv * x.get(src as usize, ci);
                }
            }
            o[ci] = acc;
        }
    }
    out
}

pub fn causal_conv1d_backward(
    x: &Mat,
    kernel: &Mat,
    d_out: &Mat,
    grads: &mut ConvGrads,
) -> Mat {
    let (l, c) = (x.rows(), x.cols());
    let w = kernel.cols();
    let mut d_x = Mat::zeros(l, c);
    for t in 0..l {
        for ci in 0..c {
            let g = d_out.get(t, ci);
            if g == 0.0 {
                continue;
            }
            grads.bias[ci] += g;
            for k in 0..w {
                let src = t as isize - (w as isize - 1) + k as isize;
                if src >= 0 {
                    let src = src as usize;
                    grads.kernel.add_at(ci, k, g * x.get(src, ci));
                    d_x.add_at(src, ci, g * kernel.get(ci, k));
                }
            }
        }
    }
    d_x
}

fn silu_mat(x: &Mat) -> Mat {
    let mut out = x.clone();
    out.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Orientation {
    Forward,
    Backward,
}

#[derive(Clone, Debug)]
pub struct S6Cache {
    pub delta: Mat,
    pub b: Mat,
    pub c: Mat,
    pub proj: ProjectionCache,
}

/// Selective scan layer over an already-activated sequence u (L x d_inner):
/// projects (delta, B, C) from u and scans with u as the drive.
pub fn s6_layer_forward(u: &Mat, p: &S6Params) -> (Mat, S6Cache) {
    let (delta, b, c, proj) = projection_with_cache(u, &p.proj);
    let inputs = scan_inputs_from(u, &delta, &b, &c, p);
    let out = selective_scan(&inputs).expect("projected scan inputs are valid");
    let l = u.rows();
    let d = u.cols();
    (
        Mat::from_vec(l, d, out.y),
        S6Cache { delta, b, c, proj },
    )
}

pub fn s6_layer_backward(
    u: &Mat,
    cache: &S6Cache,
    p: &S6Params,
    d_y: &Mat,
    grads: &mut S6Grads,
) -> Mat {
    let (l, d) = (u.rows(), u.cols());
    let n = p.a.state_dim();
    let inputs = scan_inputs_from(u, &cache.delta, &cache.b, &cache.c, p);
    let sg = selective_scan_backward(&inputs, d_y.as_slice(), &vec![0.0; d * n])
        .expect("cached scan inputs are valid");
    grads
        .a_log
        .add_assign(&p.a.chain_to_log(&Mat::from_vec(d, n, sg.d_a)));
    let d_delta = Mat::from_vec(l, d, sg.d_delta);
    let d_b = Mat::from_vec(l, n, sg.d_b);
    let d_c = Mat::from_vec(l, n, sg.d_c);
    let mut d_u = projection_backward(u, &cache.proj, &d_delta, &d_b, &d_c, &p.proj, &mut grads.proj);
    d_u.add_assign(&Mat::from_vec(l, d, sg.d_x));
    d_u
}

fn scan_inputs_from(u: &Mat, delta: &Mat, b: &Mat, c: &Mat, p: &S6Params) -> ScanInputs<f64> {
    let (l, d) = (u.rows(), u.cols());
    let n = p.a.state_dim();
    ScanInputs::new(
        l,
        d,
        n,
        u.as_slice().to_vec(),
        delta.as_slice().to_vec(),
        p.a.realized().as_slice().to_vec(),
        b.as_slice().to_vec(),
        c.as_slice().to_vec(),
        None,
    )
    .expect("projected scan inputs are valid")
}

#[derive(Clone, Debug)]
pub struct OrientCache {
    pub orientation: Orientation,
    /// Scan-path input in scan order (reversed for the backward orientation).
    pub conv_in: Mat,
    pub conv_out: Mat,
    pub silu_u: Mat,
    pub s6: S6Cache,
    /// Scan output restored to sequence order.
    pub y: Mat,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pub normed: Mat,
    pub rms_inv: Vec<f64>,
    pub z: Mat,
    pub x: Mat,
    pub silu_z: Mat,
    pub orient: Vec<OrientCache>,
    pub gated_sum: Mat,
}

pub fn block_forward(seq: &Mat, p: &BlockParams) -> (Mat, BlockCache) {
    let (normed, rms_inv) = rms_norm_with_cache(seq, &p.rms_weight, RMS_EPS);
    let z = p.up_z.forward(&normed);
    let x = p.up_x.forward(&normed);
    let silu_z = silu_mat(&z);

    let mut orient = Vec::with_capacity(2);
    let mut gated_sum = Mat::zeros(seq.rows(), p.down.in_dim());
    for o in [Orientation::Forward, Orientation::Backward] {
        let (conv, s6) = match o {
            Orientation::Forward => (&p.conv_fwd, &p.s6_fwd),
            Orientation::Backward => (&p.conv_bwd, &p.s6_bwd),
        };
        let conv_in = match o {
            Orientation::Forward => x.clone(),
            Orientation::Backward => x.reversed_rows(),
        };
        let conv_out = causal_conv1d(&conv_in, &conv.kernel, &conv.bias);
        let silu_u = silu_mat(&conv_out);
        let (y_raw, s6_cache) = s6_layer_forward(&silu_u, s6);
        let y = match o {
            Orientation::Forward => y_raw,
            Orientation::Backward => y_raw.reversed_rows(),
        };
        for t in 0..seq.rows() {
            let gs = gated_sum.row_mut(t);
            let yr = y.row(t);
            let sz = silu_z.row(t);
            for i in 0..gs.len() {
                gs[i] += yr[i] * sz[i];
            }
        }
        orient.push(OrientCache {
            orientation: o,
            conv_in,
            conv_out,
            silu_u,
            s6: s6_cache,
            y,
        });
    }

    let mut out = p.down.forward(&gated_sum);
    out.add_assign(seq);
    (
        out,
        BlockCache {
            normed,
            rms_inv,
            z,
            x,
            silu_z,
            orient,
            gated_sum,
        },
    )
}

pub fn block_backward(
    seq: &Mat,
    p: &BlockParams,
    cache: &BlockCache,
    d_out: &Mat,
    grads: &mut BlockGrads,
) -> Mat {
    let mut d_seq = d_out.clone(); // residual path
    let d_gated_sum = p.down.backward(&cache.gated_sum, d_out, &mut grads.down);

    let mut d_x = Mat::zeros(cache.x.rows(), cache.x.cols());
    let mut d_silu_z = Mat::zeros(cache.z.rows(), cache.z.cols());

    for oc in &cache.orient {
        let (conv, s6, conv_grads, s6_grads) = match oc.orientation {
            Orientation::Forward => (
                &p.conv_fwd,
                &p.s6_fwd,
                &mut grads.conv_fwd,
                &mut grads.s6_fwd,
            ),
            Orientation::Backward => (
                &p.conv_bwd,
                &p.s6_bwd,
                &mut grads.conv_bwd,
                &mut grads.s6_bwd,
            ),
        };
        // gate: gated = y (.) silu_z
        let mut d_y = Mat::zeros(oc.y.rows(), oc.y.cols());
        for t in 0..oc.y.rows() {
            let dg = d_gated_sum.row(t);
            let sz = cache.silu_z.row(t);
            let yr = oc.y.row(t);
            let dyr = d_y.row_mut(t);
            let dsz = d_silu_z.row_mut(t);
            for i in 0..dg.len() {
                dyr[i] = dg[i] * sz[i];
                dsz[i] += dg[i] * yr[i];
            }
        }
        let d_y_raw = match oc.orientation {
            Orientation::Forward => d_y,
            Orientation::Backward => d_y.reversed_rows(),
        };
        let d_silu_u = s6_layer_backward(&oc.silu_u, &oc.s6, s6, &d_y_raw, s6_grads);
        let mut d_conv_out = d_silu_u;
        for (g, pre) in d_conv_out
            .as_mut_slice()
            .iter_mut()
            .zip(oc.conv_out.as_slice())
        {
            *g *= silu_grad(*pre);
        }
        let d_conv_in = causal_conv1d_backward(&oc.conv_in, &conv.kernel, &d_conv_out, conv_grads);
        match oc.orientation {
            Orientation::Forward => d_x.add_assign(&d_conv_in),
            Orientation::Backward => d_x.add_assign(&d_conv_in.reversed_rows()),
        }
    }

    let mut d_z = d_silu_z;
    for (g, pre) in d_z.as_mut_slice().iter_mut().zip(cache.z.as_slice()) {
        *g *= silu_grad(*pre);
    }

    let mut d_normed = p.up_z.backward(&cache.normed, &d_z, &mut grads.up_z);
    d_normed.add_assign(&p.up_x.backward(&cache.normed, &d_x, &mut grads.up_x));

    let d_from_norm = rms_norm_backward(
        seq,
        &p.rms_weight,
        &cache.rms_inv,
        &d_normed,
        &mut grads.rms_weight,
    );
    d_seq.add_assign(&d_from_norm);
    d_seq
}

/// Sequential composition of the stacked blocks; caches are returned for the
/// backward pass and simply dropped during inference.
pub fn encoder_forward(seq: &Mat, p: &EncoderParams) -> (Mat, Vec<(Mat, BlockCache)>) {
    let mut cur = seq.clone();
    let mut caches = Vec::with_capacity(p.layers.len());
    for layer in &p.layers {
        let input = cur.clone();
        let (out, cache) = block_forward(&cur, layer);
        caches.push((input, cache));
        cur = out;
    }
    (cur, caches)
}

pub fn encoder_backward(
    p: &EncoderParams,
    caches: &[(Mat, BlockCache)],
    d_out: &Mat,
    grads: &mut EncoderGrads,
) -> Mat {
    let mut d = d_out.clone();
    for (layer_idx, (input, cache)) in caches.iter().enumerate().rev() {
        d = block_backward(input, &p.layers[layer_idx], cache, &d, &mut grads.layers[layer_idx]);
    }
    d
}

// ---------------------------------------------------------------------------
// named-array plumbing shared by serialization and the optimizer
// ---------------------------------------------------------------------------

macro_rules! visit_block {
    ($prefix:expr, $b:expr, $push:ident) => {
        $push(format!("{}.rms_weight", $prefix), vec![$b.rms_weight.len()], &$b.rms_weight);
        $push(
            format!("{}.up_z.w", $prefix),
            vec![$b.up_z.w.rows(), $b.up_z.w.cols()],
            $b.up_z.w.as_slice(),
        );
        $push(format!("{}.up_z.b", $prefix), vec![$b.up_z.b.len()], &$b.up_z.b);
        $push(
            format!("{}.up_x.w", $prefix),
            vec![$b.up_x.w.rows(), $b.up_x.w.cols()],
            $b.up_x.w.as_slice(),
        );
        $push(format!("{}.up_x.b", $prefix), vec![$b.up_x.b.len()], &$b.up_x.b);
        $push(
            format!("{}.conv_fwd.kernel", $prefix),
            vec![$b.conv_fwd.kernel.rows(), $b.conv_fwd.kernel.cols()],
            $b.conv_fwd.kernel.as_slice(),
        );
        $push(
            format!("{}.conv_fwd.bias", $prefix),
            vec![$b.conv_fwd.bias.len()],
            &$b.conv_fwd.bias,
        );
        $push(
            format!("{}.conv_bwd.kernel", $prefix),
            vec![$b.conv_bwd.kernel.rows(), $b.conv_bwd.kernel.cols()],
            $b.conv_bwd.kernel.as_slice(),
        );
        $push(
            format!("{}.conv_bwd.bias", $prefix),
            vec![$b.conv_bwd.bias.len()],
            &$b.conv_bwd.bias,
        );
    };
}

impl EncoderParams {
    /// Stable (name, shape, values) listing of every parameter array.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        {
            let mut push = |name: String, shape: Vec<usize>, vals: &[f64]| {
                out.push((name, shape, vals.to_vec()));
            };
            for (i, b) in self.layers.iter().enumerate() {
                let prefix = format!("encoder.layer{i}");
                visit_block!(&prefix, b, push);
                for (tag, s6) in [("s6_fwd", &b.s6_fwd), ("s6_bwd", &b.s6_bwd)] {
                    push(
                        format!("{prefix}.{tag}.a_log"),
                        vec![s6.a.channels(), s6.a.state_dim()],
                        s6.a.log_neg().as_slice(),
                    );
                    for (lt, lin) in [
                        ("delta", &s6.proj.delta),
                        ("b", &s6.proj.b),
                        ("c", &s6.proj.c),
                    ] {
                        push(
                            format!("{prefix}.{tag}.{lt}.w"),
                            vec![lin.w.rows(), lin.w.cols()],
                            lin.w.as_slice(),
                        );
                        push(format!("{prefix}.{tag}.{lt}.b"), vec![lin.b.len()], &lin.b);
                    }
                }
                push(
                    format!("{prefix}.down.w"),
                    vec![b.down.w.rows(), b.down.w.cols()],
                    b.down.w.as_slice(),
                );
                push(format!("{prefix}.down.b"), vec![b.down.b.len()], &b.down.b);
            }
        }
        out
    }

    /// Mutable flat views in the same order as [`Self::named_arrays`].
    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.layers {
            out.push(&mut b.rms_weight);
            out.push(b.up_z.w.as_mut_slice());
            out.push(&mut b.up_z.b);
            out.push(b.up_x.w.as_mut_slice());
            out.push(&mut b.up_x.b);
            out.push(b.conv_fwd.kernel.as_mut_slice());
            out.push(&mut b.conv_fwd.bias);
            out.push(b.conv_bwd.kernel.as_mut_slice());
            out.push(&mut b.conv_bwd.bias);
            for s6 in [&mut b.s6_fwd, &mut b.s6_bwd] {
                out.push(s6.a.log_neg_mut().as_mut_slice());
                out.push(s6.proj.delta.w.as_mut_slice());
                out.push(&mut s6.proj.delta.b);
                out.push(s6.proj.b.w.as_mut_slice());
                out.push(&mut s6.proj.b.b);
                out.push(s6.proj.c.w.as_mut_slice());
                out.push(&mut s6.proj.c.b);
            }
            out.push(b.down.w.as_mut_slice());
            out.push(&mut b.down.b);
        }
        out
    }
}

impl EncoderGrads {
    /// Mutable flat views in the same order as [`EncoderParams::arrays_mut`].
    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.layers {
            out.push(&mut b.rms_weight);
            out.push(b.up_z.w.as_mut_slice());
            out.push(&mut b.up_z.b);
            out.push(b.up_x.w.as_mut_slice());
            out.push(&mut b.up_x.b);
            out.push(b.conv_fwd.kernel.as_mut_slice());
            out.push(&mut b.conv_fwd.bias);
            out.push(b.conv_bwd.kernel.as_mut_slice());
            out.push(&mut b.conv_bwd.bias);
            for s6 in [&mut b.s6_fwd, &mut b.s6_bwd] {
                out.push(s6.a_log.as_mut_slice());
                out.push(s6.proj.delta.w.as_mut_slice());
                out.push(&mut s6.proj.delta.b);
                out.push(s6.proj.b.w.as_mut_slice());
                out.push(&mut s6.proj.b.b);
                out.push(s6.proj.c.w.as_mut_slice());
                out.push(&mut s6.proj.c.b);
            }
            out.push(b.down.w.as_mut_slice());
            out.push(&mut b.down.b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd::{central_diff, max_rel_err};

    fn wait_order_check(params: &EncoderParams) {
        // named_arrays and arrays_mut must walk fields in the same order
        let named = params.named_arrays();
        let mut p = params.clone();
        let muts = p.arrays_mut();
        assert_eq!(named.len(), muts.len());
        for ((_, _, vals), m) in named.iter().zip(muts.iter()) {
            assert_eq!(vals.len(), m.len());
            assert_eq!(&vals[..], &m[..]);
        }
    }

    #[test]
    fn named_arrays_align_with_mutable_views() {
        let params = init_params(3, EncoderDims::new(8, 4, 2));
        wait_order_check(&params);
    }

    #[test]
    fn rms_norm_zero_input_fixed_point() {
        let v = Mat::zeros(3, 4);
        let out = rms_norm(&v, &[1.0; 4], RMS_EPS);
        assert!(out.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn rms_norm_constant_rows_approach_sign() {
        for &c in &[2.5, -0.7] {
            let v = Mat::from_fn(2, 5, |_, _| c);
            let out = rms_norm(&v, &[1.0; 5], 1e-14);
            for x in out.as_slice() {
                assert!((x - c.signum()).abs() < 1e-6, "{x} vs sign {}", c.signum());
            }
        }
    }

    #[test]
    fn rms_norm_zero_weight_kills_output() {
        let v = Mat::random_normal(4, 3, 1.0, &mut Rng::new(5));
        let out = rms_norm(&v, &[0.0; 3], RMS_EPS);
        assert!(out.as_slice().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Mat::random_normal(6, 3, 1.0, &mut Rng::new(8));
        let mut kernel = Mat::zeros(3, 4);
        for c in 0..3 {
            kernel.set(c, 3, 1.0); // current tap
        }
        let out = causal_conv1d(&x, &kernel, &[0.0; 3]);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_zero_input_broadcasts_bias() {
        let x = Mat::zeros(5, 2);
        let kernel = Mat::random_normal(2, 4, 1.0, &mut Rng::new(2));
        let out = causal_conv1d(&x, &kernel, &[0.3, -1.2]);
        for t in 0..5 {
            assert_eq!(out.row(t), &[0.3, -1.2]);
        }
    }

    #[test]
    fn conv_hand_example_width_two() {
        let x = Mat::from_vec(3, 1, vec![1.0, 2.0, 3.0]);
        let kernel = Mat::from_vec(1, 2, vec![1.0, 1.0]);
        let out = causal_conv1d(&x, &kernel, &[0.0]);
        assert_eq!(out.as_slice(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_causality() {
        let mut rng = Rng::new(77);
        let x = Mat::random_normal(10, 2, 1.0, &mut rng);
        let kernel = Mat::random_normal(2, 4, 1.0, &mut rng);
        let bias = [0.1, -0.2];
        let base = causal_conv1d(&x, &kernel, &bias);
        let t_perturb = 6;
        let mut x2 = x.clone();
        x2.set(t_perturb, 1, x2.get(t_perturb, 1) + 5.0);
        let out = causal_conv1d(&x2, &kernel, &bias);
        for t in 0..t_perturb {
            assert_eq!(out.row(t), base.row(t), "future leaked into position {t}");
        }
    }

    #[test]
    fn block_zero_fixed_point() {
        let dims = EncoderDims::new(6, 3, 1);
        let mut params = init_params(1, dims);
        params.layers[0].zero_biases();
        let seq = Mat::zeros(5, 6);
        let (out, _) = block_forward(&seq, &params.layers[0]);
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn block_preserves_shape() {
        let dims = EncoderDims::new(6, 3, 1);
        let params = init_params(2, dims);
        let seq = Mat::random_normal(9, 6, 1.0, &mut Rng::new(4));
        let (out, _) = block_forward(&seq, &params.layers[0]);
        assert_eq!(out.rows(), 9);
        assert_eq!(out.cols(), 6);
    }

    #[test]
    fn backward_orientation_is_reversed_forward_machinery() {
        let dims = EncoderDims::new(6, 3, 1);
        let params = init_params(5, dims);
        let p = &params.layers[0];
        let seq = Mat::random_normal(7, 6, 1.0, &mut Rng::new(10));
        let (_, cache) = block_forward(&seq, p);

        let rev_in = cache.x.reversed_rows();
        let conv_out = causal_conv1d(&rev_in, &p.conv_bwd.kernel, &p.conv_bwd.bias);
        let silu_u = silu_mat(&conv_out);
        let (y_raw, _) = s6_layer_forward(&silu_u, &p.s6_bwd);
        let manual = y_raw.reversed_rows();
        assert_eq!(cache.orient[1].y, manual, "bitwise path mismatch");
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let dims = EncoderDims::new(4, 2, 1);
        let params = init_params(7, dims);
        let p = &params.layers[0];
        let mut rng = Rng::new(100);
        let seq = Mat::random_normal(6, 4, 1.0, &mut rng);
        let w = Mat::random_normal(6, 4, 1.0, &mut rng);

        let loss = |s: &Mat| -> f64 {
            let (out, _) = block_forward(s, p);
            out.as_slice()
                .iter()
                .zip(w.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let (_, cache) = block_forward(&seq, p);
        let mut grads = BlockGrads::zeros_like(p);
        let d_seq = block_backward(&seq, p, &cache, &w, &mut grads);
        let numeric = central_diff(
            |pt| loss(&Mat::from_vec(6, 4, pt.to_vec())),
            seq.as_slice(),
            1e-5,
        );
        let err = max_rel_err(d_seq.as_slice(), &numeric);
        assert!(err < 1e-4, "block input gradient error {err}");
    }

    #[test]
    fn encoder_zero_layers_is_identity() {
        let dims = EncoderDims::new(4, 2, 0);
        let params = EncoderParams {
            dims,
            layers: vec![],
        };
        let seq = Mat::random_normal(5, 4, 1.0, &mut Rng::new(3));
        let (out, _) = encoder_forward(&seq, &params);
        assert_eq!(out, seq);
    }

    #[test]
    fn encoder_single_layer_equals_block() {
        let dims = EncoderDims::new(4, 2, 1);
        let params = init_params(9, dims);
        let seq = Mat::random_normal(5, 4, 1.0, &mut Rng::new(6));
        let (out, _) = encoder_forward(&seq, &params);
        let (expect, _) = block_forward(&seq, &params.layers[0]);
        assert_eq!(out, expect);
    }

    #[test]
    fn encoder_deterministic_bitwise() {
        let dims = EncoderDims::new(8, 4, 2);
        let params = init_params(11, dims);
        let seq = Mat::random_normal(12, 8, 1.0, &mut Rng::new(13));
        let (a, _) = encoder_forward(&seq, &params);
        let (b, _) = encoder_forward(&seq, &params);
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn init_deterministic_and_seed_sensitive() {
        let dims = EncoderDims::new(8, 4, 2);
        let a = init_params(0, dims);
        let b = init_params(0, dims);
        assert_eq!(a, b);
        let c = init_params(1, dims);
        assert_ne!(a, c);
    }

    #[test]
    fn init_projection_magnitudes_bounded() {
        let dims = EncoderDims::new(16, 4, 2);
        let params = init_params(0, dims);
        for b in &params.layers {
            for lin in [
                &b.up_z,
                &b.up_x,
                &b.down,
                &b.s6_fwd.proj.delta,
                &b.s6_fwd.proj.b,
                &b.s6_fwd.proj.c,
                &b.s6_bwd.proj.delta,
                &b.s6_bwd.proj.b,
                &b.s6_bwd.proj.c,
            ] {
                assert!(lin.w.as_slice().iter().all(|v| v.abs() < 1.0));
            }
        }
    }
}
