use std::fmt;

use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: fmt::Debug> fmt::Debug for Matrix<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{:?}, ...]", &self.data[..16])
        }
    }
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = F::one();
        }
        m
    }

    /// Panics when `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::from_vec(rows, cols, data.iter().map(|&x| F::from_f64(x)).collect())
    }

    pub fn row_vector(v: &[F]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: F) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|x| {
                let v = x.as_f64();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<G: Scalar>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| G::from_f64(x.as_f64())).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: F) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        check_same("add", self, other)?;
        let mut out = self.clone();
        out.add_scaled(other, F::one());
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_same("sub", self, other)?;
        let mut out = self.clone();
        out.add_scaled(other, -F::one());
        Ok(out)
    }

    /// `op(self) * op(other)`, where `op` optionally transposes.
    pub fn matmul_t(&self, ta: bool, other: &Self, tb: bool) -> Result<Self> {
        let (m, k1) = if ta { (self.cols, self.rows) } else { self.shape() };
        let (k2, n) = if tb { (other.cols, other.rows) } else { other.shape() };
        if k1 != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: (m, k1),
                right: (k2, n),
            });
        }
        let mut out = Self::zeros(m, n);
        gemm_into(F::one(), self, ta, other, tb, F::zero(), &mut out);
        Ok(out)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        self.matmul_t(false, other, false)
    }

    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        for p in parts {
            if p.rows != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: (rows, parts[0].cols),
                    right: p.shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Self::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            let dst = out.row_mut(r);
            for p in parts {
                dst[off..off + p.cols].copy_from_slice(p.row(r));
                off += p.cols;
            }
        }
        Ok(out)
    }

    pub fn row_softmax(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&self) -> Self {
        let mut out = self.clone();
        for r in 0..self.rows {
            let (mean, inv) = row_moments(self.row(r));
            for x in out.row_mut(r) {
                *x = (*x - mean) * inv;
            }
        }
        out
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > F::zero() { x } else { F::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }
}

fn check_same<F: Scalar>(op: &'static str, a: &Matrix<F>, b: &Matrix<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Mean and `1 / sqrt(var + eps)` of a row.
#[inline]
pub fn row_moments<F: Scalar>(row: &[F]) -> (F, F) {
    let n = F::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
    (mean, F::one() / (var + F::from_f64(LAYER_NORM_EPS)).sqrt())
}

pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`. Shapes must already agree.
pub fn gemm_into<F: Scalar>(
    alpha: F,
    a: &Matrix<F>,
    ta: bool,
    b: &Matrix<F>,
    tb: bool,
    beta: F,
    c: &mut Matrix<F>,
) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let n = if tb { b.rows } else { b.cols };
    assert_eq!(c.shape(), (m, n), "gemm output shape");
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    gemm_raw(
        m, k, n, alpha, &a.data, rsa, csa, &b.data, rsb, csb, beta, &mut c.data, c.cols as isize,
    );
}

/// Strided gemm over slices, with the output row-major at `rsc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_raw<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    rsa: isize,
    csa: isize,
    b: &[F],
    rsb: isize,
    csb: isize,
    beta: F,
    c: &mut [F],
    rsc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for x in &mut c[r * rsc as usize..r * rsc as usize + n] {
                *x *= beta;
            }
        }
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows - 1) as isize * rs + (cols - 1) as isize * cs + 1
    };
    assert!(span(m, k, rsa, csa) as usize <= a.len(), "gemm lhs bounds");
    assert!(span(k, n, rsb, csb) as usize <= b.len(), "gemm rhs bounds");
    assert!(span(m, n, rsc, 1) as usize <= c.len(), "gemm out bounds");
    // SAFETY: bounds checked above; `c` is uniquely borrowed.
    unsafe {
        F::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            1,
        );
    }
}
