//! Selective scan kernel: input-dependent step sizes, zero-order-hold
//! discretization, the linear-time recurrence
//!
//! ```text
//!   h_t = Abar_t (.) h_{t-1} + Bbar_t x_t        Abar = exp(dt * A)
//!   y_t = sum_n C_t[n] * h_t[.., n]              Bbar = (exp(dt*A) - 1)/A * B
//! ```
//!
//! applied per channel with a diagonal state matrix (D independent length-N
//! diagonals), plus a brute-force expansion oracle and the exact reverse-mode
//! backward pass for every input.
//!
//! Kernel entry points are generic over [`Real`] so correctness tests run in
//! f64 while the timed benchmark runs the deployment f32 path.

use crate::num::{softplus, Real};
use crate::rng::Rng;
use crate::tensor::{Linear, LinearGrads, Mat};

/// Below this magnitude of |dt * A| the discretized drive switches to the
/// first-order limit Bbar = dt * B, avoiding catastrophic cancellation in
/// (exp(dt*A) - 1)/A near the removable singularity at A = 0.
pub const EULER_EPS: f64 = 1e-6;

/// Largest sequence length the O(L^2) expansion oracle accepts.
pub const ORACLE_MAX_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum ScanError {
    /// Domain error: step sizes must be strictly positive.
    NonPositiveDelta { t: usize, channel: usize, value: f64 },
    /// Contract error: array lengths disagree with the declared dims.
    ShapeMismatch { what: &'static str },
    /// Contract error: L must be at least 1.
    EmptySequence,
    /// Contract error: an input entry is not finite.
    NonFinite { what: &'static str },
    /// The expansion oracle is capped to bound its quadratic cost.
    OracleLengthExceeded { l: usize },
}

impl std::fmt::Display for ScanError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScanError::NonPositiveDelta { t, channel, value } => {
                write!(f, "delta[{t},{channel}] = {value} is not strictly positive")
            }
            ScanError::ShapeMismatch { what } => write!(f, "shape mismatch: {what}"),
            ScanError::EmptySequence => write!(f, "sequence length must be >= 1"),
            ScanError::NonFinite { what } => write!(f, "non-finite entries in {what}"),
            ScanError::OracleLengthExceeded { l } => {
                write!(f, "oracle limited to L <= {ORACLE_MAX_LEN}, got {l}")
            }
        }
    }
}

impl std::error::Error for ScanError {}

/// Per-channel diagonal state matrix stored as log-magnitudes of negative
/// reals, so every realized entry is strictly negative by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct StateCoefficients {
    log_neg: Mat,
}

impl StateCoefficients {
    /// Realized A[d, n] = -(n + 1) for every channel.
    pub fn default_init(d: usize, n: usize) -> Self {
        StateCoefficients {
            log_neg: Mat::from_fn(d, n, |_, ni| ((ni + 1) as f64).ln()),
        }
    }

    pub fn from_log_neg(log_neg: Mat) -> Self {
        StateCoefficients { log_neg }
    }

    /// Requires every entry strictly negative.
    pub fn from_realized(a: &Mat) -> Result<Self, ScanError> {
        let mut log_neg = Mat::zeros(a.rows(), a.cols());
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                let v = a.get(r, c);
                if !(v < 0.0) {
                    return Err(ScanError::NonFinite {
                        what: "state coefficients must be strictly negative",
                    });
                }
                log_neg.set(r, c, (-v).ln());
            }
        }
        Ok(StateCoefficients { log_neg })
    }

    pub fn channels(&self) -> usize {
        self.log_neg.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.log_neg.cols()
    }

    pub fn log_neg(&self) -> &Mat {
        &self.log_neg
    }

    pub fn log_neg_mut(&mut self) -> &mut Mat {
        &mut self.log_neg
    }

    /// Realized A matrix: -exp(log_neg), strictly negative.
    pub fn realized(&self) -> Mat {
        Mat::from_fn(self.log_neg.rows(), self.log_neg.cols(), |r, c| {
            -self.log_neg.get(r, c).exp()
        })
    }

    /// Chain a gradient w.r.t. realized A back to the log-magnitude storage:
    /// dL/d log = dL/dA * A.
    pub fn chain_to_log(&self, d_realized: &Mat) -> Mat {
        let a = self.realized();
        Mat::from_fn(a.rows(), a.cols(), |r, c| {
            d_realized.get(r, c) * a.get(r, c)
        })
    }
}

/// Full argument set of the selective recurrence. Layouts are row-major:
/// `x`/`delta` are L x D, `b`/`c` are L x N, `a`/`h0` are D x N, with `a`
/// holding realized (not log-stored) coefficients.
#[derive(Clone, Debug)]
pub struct ScanInputs<T: Real> {
    pub l: usize,
    pub d: usize,
    pub n: usize,
    pub x: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub h0: Vec<T>,
}

impl<T: Real> ScanInputs<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        l: usize,
        d: usize,
        n: usize,
        x: Vec<T>,
        delta: Vec<T>,
        a: Vec<T>,
        b: Vec<T>,
        c: Vec<T>,
        h0: Option<Vec<T>>,
    ) -> Result<Self, ScanError> {
        let inputs = ScanInputs {
            l,
            d,
            n,
            x,
            delta,
            a,
            b,
            c,
            h0: h0.unwrap_or_else(|| vec![T::ZERO; d * n]),
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<(), ScanError> {
        if self.l == 0 {
            return Err(ScanError::EmptySequence);
        }
        if self.x.len() != self.l * self.d {
            return Err(ScanError::ShapeMismatch { what: "x" });
        }
        if self.delta.len() != self.l * self.d {
            return Err(ScanError::ShapeMismatch { what: "delta" });
        }
        if self.a.len() != self.d * self.n {
            return Err(ScanError::ShapeMismatch { what: "a" });
        }
        if self.b.len() != self.l * self.n {
            return Err(ScanError::ShapeMismatch { what: "b" });
        }
        if self.c.len() != self.l * self.n {
            return Err(ScanError::ShapeMismatch { what: "c" });
        }
        if self.h0.len() != self.d * self.n {
            return Err(ScanError::ShapeMismatch { what: "h0" });
        }
        for (i, v) in self.delta.iter().enumerate() {
            if !(*v > T::ZERO) {
                return Err(ScanError::NonPositiveDelta {
                    t: i / self.d,
                    channel: i % self.d,
                    value: v.to_f64(),
                });
            }
        }
        for (vals, what) in [
            (&self.x, "x"),
            (&self.a, "a"),
            (&self.b, "b"),
            (&self.c, "c"),
            (&self.h0, "h0"),
        ] {
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(ScanError::NonFinite { what });
            }
        }
        Ok(())
    }
}

/// Discretized multipliers and drive, laid out [t][d][n]. `bbar_x` folds in
/// the input: Bbar[t,d,n] * x[t,d], the form the recurrence consumes.
#[derive(Clone, Debug)]
pub struct DiscreteTransition<T: Real> {
    pub l: usize,
    pub d: usize,
    pub n: usize,
    pub abar: Vec<T>,
    pub bbar_x: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct ScanOutput<T: Real> {
    /// L x D output sequence.
    pub y: Vec<T>,
    /// D x N final hidden state.
    pub h_final: Vec<T>,
}

/// Gradients mirroring [`ScanInputs`] shapes (realized-A parameterization).
#[derive(Clone, Debug)]
pub struct ScanGradients<T: Real> {
    pub d_x: Vec<T>,
    pub d_delta: Vec<T>,
    pub d_a: Vec<T>,
    pub d_b: Vec<T>,
    pub d_c: Vec<T>,
    pub d_h0: Vec<T>,
}

#[inline(always)]
fn discretize_step<T: Real>(dt: T, a: T, eps: T) -> (T, T) {
    let z = dt * a;
    let abar = z.exp();
    let phi = if z.abs() < eps {
        dt
    } else {
        (abar - T::ONE) / a
    };
    (abar, phi)
}

/// ZOH discretization. `a` is the realized D x N state matrix; `delta` L x D,
/// `b` L x N, `x` L x D.
pub fn zoh_discretize<T: Real>(
    a: &[T],
    delta: &[T],
    b: &[T],
    x: &[T],
    l: usize,
    d: usize,
    n: usize,
) -> Result<DiscreteTransition<T>, ScanError> {
    if l == 0 {
        return Err(ScanError::EmptySequence);
    }
    if a.len() != d * n {
        return Err(ScanError::ShapeMismatch { what: "a" });
    }
    if delta.len() != l * d {
        return Err(ScanError::ShapeMismatch { what: "delta" });
    }
    if b.len() != l * n {
        return Err(ScanError::ShapeMismatch { what: "b" });
    }
    if x.len() != l * d {
        return Err(ScanError::ShapeMismatch { what: "x" });
    }
    for (i, v) in delta.iter().enumerate() {
        if !(*v > T::ZERO) {
            return Err(ScanError::NonPositiveDelta {
                t: i / d,
                channel: i % d,
                value: v.to_f64(),
            });
        }
    }
    let eps = T::from_f64(EULER_EPS);
    let mut abar = vec![T::ZERO; l * d * n];
    let mut bbar_x = vec![T::ZERO; l * d * n];
    for t in 0..l {
        for di in 0..d {
            let dt = delta[t * d + di];
            let xv = x[t * d + di];
            let a_row = &a[di * n..(di + 1) * n];
            let b_row = &b[t * n..(t + 1) * n];
            let base = t * d * n + di * n;
            for ni in 0..n {
                let (ab, phi) = discretize_step(dt, a_row[ni], eps);
                abar[base + ni] = ab;
                bbar_x[base + ni] = phi * b_row[ni] * xv;
            }
        }
    }
    Ok(DiscreteTransition {
        l,
        d,
        n,
        abar,
        bbar_x,
    })
}

/// Single left-to-right pass; cost linear in L, state O(D*N). Discretization
/// is fused into the loop, so nothing of size L*D*N is materialized.
pub fn selective_scan<T: Real>(inputs: &ScanInputs<T>) -> Result<ScanOutput<T>, ScanError> {
    inputs.validate()?;
    let (l, d, n) = (inputs.l, inputs.d, inputs.n);
    let eps = T::from_f64(EULER_EPS);
    let mut h = inputs.h0.clone();
    let mut y = vec![T::ZERO; l * d];
    for t in 0..l {
        let b_row = &inputs.b[t * n..(t + 1) * n];
        let c_row = &inputs.c[t * n..(t + 1) * n];
        for di in 0..d {
            let dt = inputs.delta[t * d + di];
            let xv = inputs.x[t * d + di];
            let a_row = &inputs.a[di * n..(di + 1) * n];
            let h_row = &mut h[di * n..(di + 1) * n];
            let mut acc = T::ZERO;
            for ni in 0..n {
                let (abar, phi) = discretize_step(dt, a_row[ni], eps);
                let hv = abar * h_row[ni] + phi * b_row[ni] * xv;
                h_row[ni] = hv;
                acc += c_row[ni] * hv;
            }
            y[t * d + di] = acc;
        }
    }
    Ok(ScanOutput { y, h_final: h })
}

/// Brute-force oracle: expands each h_t as the explicit sum
/// h_t = sum_{s<=t} (prod_{u=s+1..t} Abar_u) (.) Bbar_s x_s + (prod Abar) (.) h0,
/// materializing every transition product. Quadratic in L and structurally
/// independent of the recurrence above; capped at [`ORACLE_MAX_LEN`].
pub fn selective_scan_oracle<T: Real>(inputs: &ScanInputs<T>) -> Result<ScanOutput<T>, ScanError> {
    inputs.validate()?;
    if inputs.l > ORACLE_MAX_LEN {
        return Err(ScanError::OracleLengthExceeded { l: inputs.l });
    }
    let (l, d, n) = (inputs.l, inputs.d, inputs.n);
    let trans = zoh_discretize(
        &inputs.a,
        &inputs.delta,
        &inputs.b,
        &inputs.x,
        l,
        d,
        n,
    )?;
    let mut y = vec![T::ZERO; l * d];
    let mut h_final = vec![T::ZERO; d * n];
    for di in 0..d {
        for ni in 0..n {
            let at = |t: usize| trans.abar[t * d * n + di * n + ni];
            let bx = |t: usize| trans.bbar_x[t * d * n + di * n + ni];
            for t in 0..l {
                let mut acc = T::ZERO;
                let mut coeff = T::ONE;
                let mut s = t as isize;
                while s >= 0 {
                    acc += coeff * bx(s as usize);
                    coeff *= at(s as usize);
                    s -= 1;
                }
                acc += coeff * inputs.h0[di * n + ni];
                y[t * d + di] += inputs.c[t * n + ni] * acc;
                if t + 1 == l {
                    h_final[di * n + ni] = acc;
                }
            }
        }
    }
    Ok(ScanOutput { y, h_final })
}

/// Exact reverse-mode gradients of the scan for cotangents `d_y` (L x D) and
/// `d_hfinal` (D x N). The hidden-state trajectory is recomputed from the
/// inputs, then a reverse-time recurrence chains through the ZOH
/// exponentials (including the Euler fallback branch, whose drive is
/// independent of A by construction).
pub fn selective_scan_backward<T: Real>(
    inputs: &ScanInputs<T>,
    d_y: &[T],
    d_hfinal: &[T],
) -> Result<ScanGradients<T>, ScanError> {
    inputs.validate()?;
    let (l, d, n) = (inputs.l, inputs.d, inputs.n);
    if d_y.len() != l * d {
        return Err(ScanError::ShapeMismatch { what: "d_y" });
    }
    if d_hfinal.len() != d * n {
        return Err(ScanError::ShapeMismatch { what: "d_hfinal" });
    }
    if d_y.iter().any(|v| !v.is_finite()) || d_hfinal.iter().any(|v| !v.is_finite()) {
        return Err(ScanError::NonFinite { what: "cotangents" });
    }
    let eps = T::from_f64(EULER_EPS);

    // forward replay, keeping the trajectory and per-step discretization
    let mut h_all = vec![T::ZERO; l * d * n];
    let mut abar_all = vec![T::ZERO; l * d * n];
    let mut phi_all = vec![T::ZERO; l * d * n];
    {
        let mut h = inputs.h0.clone();
        for t in 0..l {
            let b_row = &inputs.b[t * n..(t + 1) * n];
            for di in 0..d {
                let dt = inputs.delta[t * d + di];
                let xv = inputs.x[t * d + di];
                let a_row = &inputs.a[di * n..(di + 1) * n];
                let h_row = &mut h[di * n..(di + 1) * n];
                let base = t * d * n + di * n;
                for ni in 0..n {
                    let (abar, phi) = discretize_step(dt, a_row[ni], eps);
                    let hv = abar * h_row[ni] + phi * b_row[ni] * xv;
                    h_row[ni] = hv;
                    h_all[base + ni] = hv;
                    abar_all[base + ni] = abar;
                    phi_all[base + ni] = phi;
                }
            }
        }
    }

    let mut g = d_hfinal.to_vec();
    let mut d_x = vec![T::ZERO; l * d];
    let mut d_delta = vec![T::ZERO; l * d];
    let mut d_a = vec![T::ZERO; d * n];
    let mut d_b = vec![T::ZERO; l * n];
    let mut d_c = vec![T::ZERO; l * n];

    for t in (0..l).rev() {
        for di in 0..d {
            let dyv = d_y[t * d + di];
            let dt = inputs.delta[t * d + di];
            let xv = inputs.x[t * d + di];
            let base = t * d * n + di * n;
            for ni in 0..n {
                let hv = h_all[base + ni];
                let cv = inputs.c[t * n + ni];
                d_c[t * n + ni] += dyv * hv;
                let mut gv = g[di * n + ni] + cv * dyv;

                let abar = abar_all[base + ni];
                let phi = phi_all[base + ni];
                let av = inputs.a[di * n + ni];
                let bv = inputs.b[t * n + ni];
                let h_prev = if t == 0 {
                    inputs.h0[di * n + ni]
                } else {
                    h_all[(t - 1) * d * n + di * n + ni]
                };

                let d_abar = gv * h_prev;
                let d_phi = gv * bv * xv;
                d_b[t * n + ni] += gv * phi * xv;
                d_x[t * d + di] += gv * phi * bv;

                let z = dt * av;
                if z.abs() < eps {
                    // Euler branch: phi = dt, so d phi/d dt = 1, d phi/d A = 0.
                    d_delta[t * d + di] += d_abar * av * abar + d_phi;
                    d_a[di * n + ni] += d_abar * dt * abar;
                } else {
                    // exact branch: d phi/d dt = abar, d phi/d A = (dt*abar - phi)/A.
                    d_delta[t * d + di] += d_abar * av * abar + d_phi * abar;
                    d_a[di * n + ni] += d_abar * dt * abar + d_phi * (dt * abar - phi) / av;
                }

                gv *= abar;
                g[di * n + ni] = gv;
            }
        }
    }

    Ok(ScanGradients {
        d_x,
        d_delta,
        d_a,
        d_b,
        d_c,
        d_h0: g,
    })
}

/// Input-dependent parameter projections for the selective mechanism:
/// B and C are affine in x; delta goes through softplus so it stays
/// strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionWeights {
    pub delta: Linear,
    pub b: Linear,
    pub c: Linear,
}

#[derive(Clone, Debug)]
pub struct ProjectionGrads {
    pub delta: LinearGrads,
    pub b: LinearGrads,
    pub c: LinearGrads,
}

impl ProjectionWeights {
    pub fn zeros(d: usize, n: usize) -> Self {
        ProjectionWeights {
            delta: Linear::zeros(d, d),
            b: Linear::zeros(n, d),
            c: Linear::zeros(n, d),
        }
    }

    /// Weights truncated-normal at 1/sqrt(d); the delta bias is drawn
    /// log-uniformly so the initial softplus output lands in [0.001, 0.1].
    /// The slow end matters: state carried across a few hundred tokens
    /// decays like exp(-delta * |A| * distance), and cross-block pathways
    /// (trajectory prompts feeding search tokens) never train if every
    /// channel forgets within a few dozen steps.
    pub fn init(d: usize, n: usize, rng: &mut Rng) -> Self {
        let mut p = ProjectionWeights {
            delta: Linear::init(d, d, rng),
            b: Linear::init(n, d, rng),
            c: Linear::init(n, d, rng),
        };
        for bias in p.delta.b.iter_mut() {
            let target = 0.001 * (100.0f64).powf(rng.next_f64());
            *bias = (target.exp() - 1.0).ln(); // softplus inverse
        }
        p
    }
}

impl ProjectionGrads {
    pub fn zeros_like(p: &ProjectionWeights) -> Self {
        ProjectionGrads {
            delta: LinearGrads::zeros_like(&p.delta),
            b: LinearGrads::zeros_like(&p.b),
            c: LinearGrads::zeros_like(&p.c),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionCache {
    /// Pre-softplus activations of the delta path, L x D.
    pub pre_delta: Mat,
}

/// (delta, B, C) from x. delta = softplus(affine(x)) > 0 always.
pub fn input_dependent_projection(x: &Mat, proj: &ProjectionWeights) -> (Mat, Mat, Mat) {
    let (delta, b, c, _) = projection_with_cache(x, proj);
    (delta, b, c)
}

/// Floor applied after softplus: the map underflows to exactly zero for very
/// negative pre-activations, while the discretization requires delta > 0.
pub const MIN_DELTA: f64 = 1e-300;

pub fn projection_with_cache(
    x: &Mat,
    proj: &ProjectionWeights,
) -> (Mat, Mat, Mat, ProjectionCache) {
    let pre_delta = proj.delta.forward(x);
    let mut delta = pre_delta.clone();
    for v in delta.as_mut_slice() {
        *v = softplus(*v).max(MIN_DELTA);
    }
    let b = proj.b.forward(x);
    let c = proj.c.forward(x);
    (delta, b, c, ProjectionCache { pre_delta })
}

/// Chains cotangents of (delta, B, C) back to x and the projection weights.
pub fn projection_backward(
    x: &Mat,
    cache: &ProjectionCache,
    d_delta: &Mat,
    d_b: &Mat,
    d_c: &Mat,
    proj: &ProjectionWeights,
    grads: &mut ProjectionGrads,
) -> Mat {
    let mut d_pre = d_delta.clone();
    for (g, pre) in d_pre
        .as_mut_slice()
        .iter_mut()
        .zip(cache.pre_delta.as_slice())
    {
        *g *= crate::num::sigmoid(*pre); // softplus' = sigmoid
    }
    let mut d_x = proj.delta.backward(x, &d_pre, &mut grads.delta);
    d_x.add_assign(&proj.b.backward(x, d_b, &mut grads.b));
    d_x.add_assign(&proj.c.backward(x, d_c, &mut grads.c));
    d_x
}

/// Seeded random scan instance. `euler` confines |delta * A| far below
/// [`EULER_EPS`] so finite-difference probes stay inside the fallback
/// branch; otherwise |delta * A| stays well above it.
pub fn sample_inputs(rng: &mut Rng, l: usize, d: usize, n: usize, euler: bool) -> ScanInputs<f64> {
    let x: Vec<f64> = (0..l * d).map(|_| rng.normal()).collect();
    let delta: Vec<f64> = (0..l * d)
        .map(|_| {
            if euler {
                rng.range(0.01, 0.05)
            } else {
                rng.range(0.05, 0.5)
            }
        })
        .collect();
    let a: Vec<f64> = (0..d * n)
        .map(|_| {
            if euler {
                -rng.range(1e-7, 2e-6)
            } else {
                -rng.range(0.1, 2.0)
            }
        })
        .collect();
    let b: Vec<f64> = (0..l * n).map(|_| rng.normal()).collect();
    let c: Vec<f64> = (0..l * n).map(|_| rng.normal()).collect();
    let h0: Vec<f64> = (0..d * n).map(|_| 0.5 * rng.normal()).collect();
    ScanInputs::new(l, d, n, x, delta, a, b, c, Some(h0)).expect("sampled inputs are valid")
}
