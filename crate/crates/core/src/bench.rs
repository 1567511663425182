//! Scaling benchmark: the linear-time selective scan against an exact
//! softmax-attention reference, with analytic FLOP and working-set models.
//!
//! Wall-clock measurements are single-threaded CPU timings in f32 (the
//! deployment precision); the claim under test is the growth exponent, not
//! absolute numbers. The analytic models are documented below and verified
//! by ratio tests, independently of the timings.

use std::io::Write;
use std::time::Instant;

use crate::num::Real;
use crate::rng::Rng;
use crate::ssm::{selective_scan, ScanInputs};

/// Per-(t, d, n) operation count of the fused scan: discretize
/// (mul + exp = 2, sub + div + mul + mul = 4 for the drive), recurrence
/// multiply-accumulate (2) and the output contraction (2).
pub const SCAN_FLOPS_PER_ELEMENT: u64 = 10;

#[derive(Debug)]
pub enum BenchError {
    EmptyLengths,
    LengthsNotAscending,
    TooFewRepeats { got: usize },
    EmptyRecords,
    Io(std::io::Error),
    Parse(String),
}

impl std::fmt::Display for BenchError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BenchError::EmptyLengths => write!(f, "no lengths given"),
            BenchError::LengthsNotAscending => write!(f, "lengths must be strictly ascending"),
            BenchError::TooFewRepeats { got } => {
                write!(f, "at least 5 repeats required, got {got}")
            }
            BenchError::EmptyRecords => write!(f, "no records to emit"),
            BenchError::Io(e) => write!(f, "io error: {e}"),
            BenchError::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for BenchError {}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Io(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum KernelKind {
    Attention,
    Scan,
}

impl KernelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            KernelKind::Attention => "attention",
            KernelKind::Scan => "scan",
        }
    }
}

impl std::str::FromStr for KernelKind {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "attention" => Ok(KernelKind::Attention),
            "scan" => Ok(KernelKind::Scan),
            other => Err(BenchError::Parse(format!("unknown kernel {other}"))),
        }
    }
}

/// One measurement point.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub kernel: KernelKind,
    pub l: usize,
    pub d: usize,
    pub n: usize,
    pub flops: u64,
    pub wall_ns: u64,
    pub peak_bytes: u64,
    pub repeats: u32,
    pub trimmed: bool,
    pub truncated: bool,
}

/// Analytic FLOP model of one attention layer at sequence length L, width D:
/// score and value matmuls (4 L^2 D) plus the four projections (8 L D^2).
/// This is the model, not a hardware measurement.
pub fn flops_attention(l: usize, d: usize) -> u64 {
    let (l, d) = (l as u64, d as u64);
    4 * l * l * d + 8 * l * d * d
}

/// Analytic FLOP model of the scan: exactly linear in L (and in D and N).
pub fn flops_scan(l: usize, d: usize, n: usize) -> u64 {
    SCAN_FLOPS_PER_ELEMENT * l as u64 * d as u64 * n as u64
}

/// Working-set model of the textbook materialized attention formulation:
/// Q, K, V, output (4 L D) plus the L x L score matrix. The timed reference
/// below streams key/value tiles and never allocates the score matrix; the
/// model reflects the canonical formulation whose quadratic growth is the
/// claim being measured.
pub fn peak_bytes_attention(l: usize, d: usize, elem_bytes: usize) -> u64 {
    (4 * l as u64 * d as u64 + l as u64 * l as u64) * elem_bytes as u64
}

/// Working-set model of the scan: x, delta, y (3 L D), B and C (2 L N) and
/// the hidden state (D N).
pub fn peak_bytes_scan(l: usize, d: usize, n: usize, elem_bytes: usize) -> u64 {
    (3 * l as u64 * d as u64 + 2 * l as u64 * n as u64 + d as u64 * n as u64)
        * elem_bytes as u64
}

/// Dot product with eight independent accumulator lanes so the reduction is
/// not one long dependency chain (the strict in-order form runs at FMA
/// latency rather than throughput).
#[inline]
fn dot_wide<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let mut ai = a.chunks_exact(8);
    let mut bi = b.chunks_exact(8);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        for lane in 0..8 {
            acc[lane] += ca[lane] * cb[lane];
        }
    }
    let mut sum = T::ZERO;
    for (x, y) in ai.remainder().iter().zip(bi.remainder()) {
        sum += *x * *y;
    }
    for lane in 0..8 {
        sum += acc[lane];
    }
    sum
}

/// Exact single-head softmax attention out = softmax(Q K^T / sqrt(D)) V,
/// computed with a streaming (online-softmax) tiling so the score matrix is
/// never materialized. Results are exact up to floating-point reassociation.
pub fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], l: usize, d: usize, out: &mut [T]) {
    assert_eq!(q.len(), l * d);
    assert_eq!(k.len(), l * d);
    assert_eq!(v.len(), l * d);
    assert_eq!(out.len(), l * d);
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let neg_inf = T::from_f64(f64::NEG_INFINITY);
    let one = T::ONE;

    const BQ: usize = 32;
    const BK: usize = 64;
    let mut scores = vec![T::ZERO; BQ * BK];
    let mut m = vec![neg_inf; BQ];
    let mut s = vec![T::ZERO; BQ];
    let mut acc = vec![T::ZERO; BQ * d];

    let mut qi = 0;
    while qi < l {
        let bq = BQ.min(l - qi);
        for v_ in m.iter_mut().take(bq) {
            *v_ = neg_inf;
        }
        for v_ in s.iter_mut().take(bq) {
            *v_ = T::ZERO;
        }
        for v_ in acc.iter_mut().take(bq * d) {
            *v_ = T::ZERO;
        }

        let mut kj = 0;
        while kj < l {
            let bk = BK.min(l - kj);
            // score tile
            for i in 0..bq {
                let qrow = &q[(qi + i) * d..(qi + i + 1) * d];
                let srow = &mut scores[i * BK..i * BK + bk];
                for (j, sv) in srow.iter_mut().enumerate() {
                    let krow = &k[(kj + j) * d..(kj + j + 1) * d];
                    *sv = dot_wide(qrow, krow) * scale;
                }
            }
            // online-softmax update per query row
            for i in 0..bq {
                let srow = &scores[i * BK..i * BK + bk];
                let mut tile_max = neg_inf;
                for sv in srow {
                    tile_max = tile_max.maximum(*sv);
                }
                let new_m = m[i].maximum(tile_max);
                let corr = (m[i] - new_m).exp();
                m[i] = new_m;
                let acc_row = &mut acc[i * d..(i + 1) * d];
                if !(corr == one) {
                    s[i] *= corr;
                    for av in acc_row.iter_mut() {
                        *av *= corr;
                    }
                }
                // value accumulation four key rows at a time
                let mut j = 0;
                while j + 4 <= bk {
                    let w0 = (srow[j] - new_m).exp();
                    let w1 = (srow[j + 1] - new_m).exp();
                    let w2 = (srow[j + 2] - new_m).exp();
                    let w3 = (srow[j + 3] - new_m).exp();
                    s[i] += w0 + w1 + w2 + w3;
                    let base = (kj + j) * d;
                    let vrows = &v[base..base + 4 * d];
                    let (v0, rest) = vrows.split_at(d);
                    let (v1, rest) = rest.split_at(d);
                    let (v2, v3) = rest.split_at(d);
                    for (x, av) in acc_row.iter_mut().enumerate() {
                        *av += w0 * v0[x] + w1 * v1[x] + w2 * v2[x] + w3 * v3[x];
                    }
                    j += 4;
                }
                while j < bk {
                    let w = (srow[j] - new_m).exp();
                    s[i] += w;
                    let vrow = &v[(kj + j) * d..(kj + j + 1) * d];
                    for (a, b) in acc_row.iter_mut().zip(vrow) {
                        *a += w * *b;
                    }
                    j += 1;
                }
            }
            kj += bk;
        }
        for i in 0..bq {
            let acc_row = &acc[i * d..(i + 1) * d];
            let orow = &mut out[(qi + i) * d..(qi + i + 1) * d];
            for (o, a) in orow.iter_mut().zip(acc_row) {
                *o = *a / s[i];
            }
        }
        qi += bq;
    }
}

/// Three-loop reference with a materialized score matrix; test oracle only.
pub fn attention_naive_f64(q: &[f64], k: &[f64], v: &[f64], l: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut scores = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            let mut dot = 0.0;
            for x in 0..d {
                dot += q[i * d + x] * k[j * d + x];
            }
            scores[i * l + j] = dot * scale;
        }
    }
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        let row = &mut scores[i * l..(i + 1) * l];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for sv in row.iter_mut() {
            *sv = (*sv - max).exp();
            sum += *sv;
        }
        for sv in row.iter_mut() {
            *sv /= sum;
        }
        for j in 0..l {
            let p = row[j];
            for x in 0..d {
                out[i * d + x] += p * v[j * d + x];
            }
        }
    }
    out
}

fn try_alloc<T: Real>(len: usize) -> Option<Vec<T>> {
    let mut v: Vec<T> = Vec::new();
    if v.try_reserve_exact(len).is_err() {
        return None;
    }
    v.resize(len, T::ZERO);
    Some(v)
}

fn seeded<T: Real>(rng: &mut Rng, len: usize) -> Option<Vec<T>> {
    let mut v = try_alloc::<T>(len)?;
    for x in v.iter_mut() {
        *x = T::from_f64(rng.normal());
    }
    Some(v)
}

/// Deterministic f32 scan instance for benchmarking.
pub fn scan_bench_inputs(seed: u64, l: usize, d: usize, n: usize) -> Option<ScanInputs<f32>> {
    let mut rng = Rng::new(seed);
    let x = seeded::<f32>(&mut rng, l * d)?;
    let mut delta = try_alloc::<f32>(l * d)?;
    for v in delta.iter_mut() {
        *v = rng.range(0.01, 0.1) as f32;
    }
    let mut a = try_alloc::<f32>(d * n)?;
    for (i, v) in a.iter_mut().enumerate() {
        *v = -((i % n) as f32 + 1.0);
    }
    let b = seeded::<f32>(&mut rng, l * n)?;
    let c = seeded::<f32>(&mut rng, l * n)?;
    ScanInputs::new(l, d, n, x, delta, a, b, c, None).ok()
}

fn trimmed_mean_ns(mut samples: Vec<u64>) -> u64 {
    samples.sort_unstable();
    let trimmed = &samples[1..samples.len() - 1];
    let sum: u128 = trimmed.iter().map(|v| *v as u128).sum();
    (sum / trimmed.len() as u128) as u64
}

/// Executes both kernels at each length with 2 warmups and `repeats` timed
/// runs (trimmed mean). With `timing` false no clocks are read and wall_ns
/// is reported as 0, giving byte-identical output across runs.
pub fn run_scaling_benchmark(
    lengths: &[usize],
    d: usize,
    n: usize,
    repeats: usize,
    seed: u64,
    timing: bool,
) -> Result<Vec<BenchRecord>, BenchError> {
    if lengths.is_empty() {
        return Err(BenchError::EmptyLengths);
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BenchError::LengthsNotAscending);
    }
    if repeats < 5 {
        return Err(BenchError::TooFewRepeats { got: repeats });
    }
    let mut records = Vec::new();

    for &l in lengths {
        let mut record = BenchRecord {
            kernel: KernelKind::Attention,
            l,
            d,
            n,
            flops: flops_attention(l, d),
            wall_ns: 0,
            peak_bytes: peak_bytes_attention(l, d, 4),
            repeats: repeats as u32,
            trimmed: true,
            truncated: false,
        };
        if timing {
            let mut rng = Rng::new(seed ^ l as u64);
            let bufs = (
                seeded::<f32>(&mut rng, l * d),
                seeded::<f32>(&mut rng, l * d),
                seeded::<f32>(&mut rng, l * d),
                try_alloc::<f32>(l * d),
            );
            match bufs {
                (Some(q), Some(k), Some(v), Some(mut out)) => {
                    let mut run = || {
                        let t0 = Instant::now();
                        attention_forward(&q, &k, &v, l, d, &mut out);
                        std::hint::black_box(out[0]);
                        t0.elapsed().as_nanos() as u64
                    };
                    for _ in 0..2 {
                        run();
                    }
                    let samples: Vec<u64> = (0..repeats).map(|_| run()).collect();
                    record.wall_ns = trimmed_mean_ns(samples).max(1);
                }
                _ => record.truncated = true,
            }
        }
        records.push(record);
    }

    for &l in lengths {
        let mut record = BenchRecord {
            kernel: KernelKind::Scan,
            l,
            d,
            n,
            flops: flops_scan(l, d, n),
            wall_ns: 0,
            peak_bytes: peak_bytes_scan(l, d, n, 4),
            repeats: repeats as u32,
            trimmed: true,
            truncated: false,
        };
        if timing {
            match scan_bench_inputs(seed ^ (l as u64).rotate_left(17), l, d, n) {
                Some(inputs) => {
                    let run = || {
                        let t0 = Instant::now();
                        let out = selective_scan(&inputs).expect("bench inputs are valid");
                        std::hint::black_box(out.y[0]);
                        t0.elapsed().as_nanos() as u64
                    };
                    for _ in 0..2 {
                        run();
                    }
                    let samples: Vec<u64> = (0..repeats).map(|_| run()).collect();
                    record.wall_ns = trimmed_mean_ns(samples).max(1);
                }
                None => record.truncated = true,
            }
        }
        records.push(record);
    }

    records.sort_by(|a, b| (a.kernel, a.l).cmp(&(b.kernel, b.l)));
    Ok(records)
}

/// Least-squares slope of ln(wall) against ln(L).
pub fn loglog_slope(points: &[(usize, u64)]) -> f64 {
    assert!(points.len() >= 2);
    let xs: Vec<f64> = points.iter().map(|(l, _)| (*l as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, w)| (*w as f64).ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

pub const CSV_HEADER: &str = "kernel,L,D,N,flops,wall_ns,peak_bytes";

pub fn emit_records(records: &[BenchRecord], w: &mut impl Write) -> Result<(), BenchError> {
    if records.is_empty() {
        return Err(BenchError::EmptyRecords);
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| (a.kernel, a.l).cmp(&(b.kernel, b.l)));
    writeln!(w, "{CSV_HEADER}")?;
    for r in &sorted {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.kernel.as_str(),
            r.l,
            r.d,
            r.n,
            r.flops,
            r.wall_ns,
            r.peak_bytes
        )?;
    }
    Ok(())
}

pub fn emit_records_to_path(
    records: &[BenchRecord],
    path: &std::path::Path,
) -> Result<(), BenchError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    emit_records(records, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn parse_records(text: &str) -> Result<Vec<BenchRecord>, BenchError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(BenchError::Parse(format!("bad header: {other:?}"))),
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(BenchError::Parse(format!("line {}: want 7 fields", ln + 2)));
        }
        let num = |s: &str| -> Result<u64, BenchError> {
            s.parse::<u64>()
                .map_err(|e| BenchError::Parse(format!("line {}: {e}", ln + 2)))
        };
        out.push(BenchRecord {
            kernel: parts[0].parse()?,
            l: num(parts[1])? as usize,
            d: num(parts[2])? as usize,
            n: num(parts[3])? as usize,
            flops: num(parts[4])?,
            wall_ns: num(parts[5])?,
            peak_bytes: num(parts[6])?,
            repeats: 0,
            trimmed: true,
            truncated: false,
        });
    }
    Ok(out)
}
