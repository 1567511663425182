//! Minimal row-major f64 matrix plus the affine layer used throughout the
//! model stack. Loops are written directly; shapes at this scale never
//! justify a BLAS dependency and the hand-written backward passes stay
//! auditable this way.

use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(rng.trunc_normal(std));
        }
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline(always)]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline(always)]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Rows in reverse order (sequence reversal along the length axis).
    pub fn reversed_rows(&self) -> Mat {
        let mut out = Mat::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(self.row(self.rows - 1 - r));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// acc += w * v
#[inline]
pub fn axpy(acc: &mut [f64], w: f64, v: &[f64]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, x) in acc.iter_mut().zip(v) {
        *a += w * x;
    }
}

/// Affine map y = W x + b with W stored out_dim x in_dim.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Mat,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            w: Mat::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    /// Truncated-normal weights scaled by 1/sqrt(in_dim), zero bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (in_dim as f64).sqrt();
        Linear {
            w: Mat::random_normal(out_dim, in_dim, std, rng),
            b: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    /// x: L x in_dim -> L x out_dim.
    pub fn forward(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols(), self.in_dim(), "linear input width mismatch");
        let mut y = Mat::zeros(x.rows(), self.out_dim());
        for t in 0..x.rows() {
            let xr = x.row(t);
            let yr = y.row_mut(t);
            for (o, yo) in yr.iter_mut().enumerate() {
                *yo = dot(self.w.row(o), xr) + self.b[o];
            }
        }
        y
    }

    /// Accumulates parameter gradients and returns d_x.
    pub fn backward(&self, x: &Mat, d_y: &Mat, grads: &mut LinearGrads) -> Mat {
        assert_eq!(d_y.rows(), x.rows());
        assert_eq!(d_y.cols(), self.out_dim());
        let mut d_x = Mat::zeros(x.rows(), self.in_dim());
        for t in 0..x.rows() {
            let xr = x.row(t);
            let dyr = d_y.row(t);
            let dxr = d_x.row_mut(t);
            for (o, &g) in dyr.iter().enumerate() {
                grads.b[o] += g;
                axpy(grads.w.row_mut(o), g, xr);
                axpy(dxr, g, self.w.row(o));
            }
        }
        d_x
    }
}

impl LinearGrads {
    pub fn zeros_like(l: &Linear) -> Self {
        LinearGrads {
            w: Mat::zeros(l.w.rows(), l.w.cols()),
            b: vec![0.0; l.b.len()],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_forward_known_values() {
        let l = Linear {
            w: Mat::from_vec(2, 3, vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0]),
            b: vec![0.5, -0.5],
        };
        let x = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let y = l.forward(&x);
        assert_eq!(y.row(0), &[1.0 - 3.0 + 0.5, 2.0 + 2.0 - 0.5]);
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = Rng::new(9);
        let l = Linear::init(3, 4, &mut rng);
        let x = Mat::random_normal(5, 4, 1.0, &mut rng);
        let wsum = Mat::random_normal(5, 3, 1.0, &mut rng);

        let loss = |lin: &Linear, xin: &Mat| -> f64 {
            let y = lin.forward(xin);
            y.as_slice()
                .iter()
                .zip(wsum.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };

        let mut grads = LinearGrads::zeros_like(&l);
        let d_x = l.backward(&x, &wsum, &mut grads);

        let h = 1e-6;
        // spot-check a weight, a bias and an input entry
        let mut lp = l.clone();
        lp.w.set(1, 2, lp.w.get(1, 2) + h);
        let mut lm = l.clone();
        lm.w.set(1, 2, lm.w.get(1, 2) - h);
        let fd_w = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((grads.w.get(1, 2) - fd_w).abs() < 1e-6);

        let mut lp = l.clone();
        lp.b[0] += h;
        let mut lm = l.clone();
        lm.b[0] -= h;
        let fd_b = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((grads.b[0] - fd_b).abs() < 1e-6);

        let mut xp = x.clone();
        xp.set(2, 1, x.get(2, 1) + h);
        let mut xm = x.clone();
        xm.set(2, 1, x.get(2, 1) - h);
        let fd_x = (loss(&l, &xp) - loss(&l, &xm)) / (2.0 * h);
        assert!((d_x.get(2, 1) - fd_x).abs() < 1e-6);
    }

    #[test]
    fn reversed_rows_involution() {
        let m = Mat::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(m.reversed_rows().reversed_rows(), m);
        assert_eq!(m.reversed_rows().row(0), &[5.0, 6.0]);
    }
}
