//! Dense f64 vectors and matrices, stable reductions, the rank-1 nullspace
//! projector, and the Adam update.

use crate::error::{Error, Result};
use crate::par;

/// Norms below this are treated as zero by [`l2_normalize`] and
/// [`rank1_nullspace_projector`].
pub const ZERO_NORM_TOL: f64 = 1e-12;

pub type Vector = Vec<f64>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("Matrix::new"));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension {
                context: "Matrix::new",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("Matrix::from_rows"))?;
        let cols = first.len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Dimension {
                    context: "Matrix::from_rows",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Gather the listed rows of `self` into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
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
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "Matrix::sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    /// `self · v`.
    pub fn mat_vec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Dimension {
                context: "Matrix::mat_vec",
                expected: self.cols,
                found: v.len(),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Add `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        debug_assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_mut(self.cols) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    /// Column sums.
    pub fn column_sums(&self) -> Vector {
        let mut s = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols) {
            for (acc, x) in s.iter_mut().zip(row) {
                *acc += x;
            }
        }
        s
    }

    fn check_same_shape(&self, other: &Matrix, context: &'static str) -> Result<()> {
        if self.rows != other.rows {
            return Err(Error::Dimension {
                context,
                expected: self.rows,
                found: other.rows,
            });
        }
        if self.cols != other.cols {
            return Err(Error::Dimension {
                context,
                expected: self.cols,
                found: other.cols,
            });
        }
        Ok(())
    }
}

/// Dot product with a fixed four-lane accumulation order.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_inner(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

fn nt_kernel(a: &Matrix, b: &Matrix, parallel: bool) -> Result<Matrix> {
    check_inner("matmul_nt", a.cols, b.cols)?;
    let mut out = Matrix::zeros(a.rows, b.rows);
    let work = if parallel { a.rows * b.rows * a.cols } else { 0 };
    par::for_each_row(&mut out.data, b.rows, work, |i, row| {
        let ai = a.row(i);
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, b.row(j));
        }
    });
    Ok(out)
}

fn nn_kernel(a: &Matrix, b: &Matrix, parallel: bool) -> Result<Matrix> {
    check_inner("matmul_nn", a.cols, b.rows)?;
    let mut out = Matrix::zeros(a.rows, b.cols);
    let work = if parallel { a.rows * b.cols * a.cols } else { 0 };
    par::for_each_row(&mut out.data, b.cols, work, |i, row| {
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != 0.0 {
                axpy(aik, b.row(k), row);
            }
        }
    });
    Ok(out)
}

fn tn_kernel(a: &Matrix, b: &Matrix, parallel: bool) -> Result<Matrix> {
    check_inner("matmul_tn", a.rows, b.rows)?;
    let mut out = Matrix::zeros(a.cols, b.cols);
    let work = if parallel { a.cols * b.cols * a.rows } else { 0 };
    par::for_each_row(&mut out.data, b.cols, work, |k, row| {
        for i in 0..a.rows {
            let aik = a.data[i * a.cols + k];
            if aik != 0.0 {
                axpy(aik, b.row(i), row);
            }
        }
    });
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    nt_kernel(a, b, true)
}

/// `a · b`.
pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    nn_kernel(a, b, true)
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    tn_kernel(a, b, true)
}

/// Single-threaded variants of the matrix products, always available.
pub mod seq {
    use super::*;

    pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        nt_kernel(a, b, false)
    }

    pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        nn_kernel(a, b, false)
    }

    pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        tn_kernel(a, b, false)
    }
}

/// `log Σ exp(vᵢ)` via max-shift.
pub fn logsumexp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("logsumexp"));
    }
    Ok(logsumexp_unchecked(v))
}

#[inline]
pub(crate) fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = v.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax of one row, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vector> {
    let n = norm(v);
    if !(n > ZERO_NORM_TOL) {
        return Err(Error::Degenerate {
            context: "l2_normalize",
            norm: n,
        });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `I − ŵŵᵀ` with `ŵ = w / ‖w‖`: the orthogonal projector onto the
/// hyperplane orthogonal to `w`.
pub fn rank1_nullspace_projector(w: &[f64]) -> Result<Matrix> {
    let n = norm(w);
    if !(n > ZERO_NORM_TOL) {
        return Err(Error::Degenerate {
            context: "rank1_nullspace_projector",
            norm: n,
        });
    }
    let u: Vec<f64> = w.iter().map(|x| x / n).collect();
    let d = u.len();
    let mut p = Matrix::identity(d);
    for i in 0..d {
        for j in 0..d {
            p.data[i * d + j] -= u[i] * u[j];
        }
    }
    Ok(p)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment estimates and hyperparameters for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vector,
    pub v: Vector,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// In-place form of [`adam_step`]; produces the same bits.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        check_inner("AdamState::update", self.m.len(), params.len())?;
        check_inner("AdamState::update", params.len(), grads.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// One bias-corrected Adam update, returning new parameters and state.
pub fn adam_step(state: &AdamState, params: &[f64], grads: &[f64]) -> Result<(Vector, AdamState)> {
    let mut next = state.clone();
    let mut p = params.to_vec();
    next.update(&mut p, grads)?;
    Ok((p, next))
}
