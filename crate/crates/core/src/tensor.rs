//! Dense double-precision tensor kernels.
//!
//! Row-major matrices and flat vectors with the handful of operations the
//! models need. Everything is single-threaded with a fixed left-to-right
//! summation order, so results are bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    /// A · v.
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::dim(
                "matvec",
                format!("{}x{} times vector of length {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = Vector::zeros(self.rows);
        self.mv_into(v.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Aᵀ · v.
    pub fn matvec_t(&self, v: &Vector) -> Result<Vector> {
        if v.len() != self.rows {
            return Err(Error::dim(
                "matvec_t",
                format!("{}x{} transposed times vector of length {}", self.rows, self.cols, v.len()),
            ));
        }
        let mut out = Vector::zeros(self.cols);
        self.mv_t_into(v.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let out_row = out.row_mut(r);
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = other.row(k);
                for c in 0..b_row.len() {
                    out_row[c] += a * b_row[c];
                }
            }
        }
        Ok(out)
    }

    /// out = A · v over raw slices; shapes checked in debug builds only.
    #[inline]
    pub(crate) fn mv_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for i in 0..row.len() {
                acc += row[i] * v[i];
            }
            out[r] = acc;
        }
    }

    /// out += Aᵀ · v over raw slices.
    #[inline]
    pub(crate) fn mv_t_add_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let s = v[r];
            for i in 0..row.len() {
                out[i] += row[i] * s;
            }
        }
    }

    #[inline]
    pub(crate) fn mv_t_into(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.mv_t_add_into(v, out);
    }

    /// self += a ⊗ b (outer product accumulate).
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for r in 0..self.rows {
            let row = self.row_mut(r);
            let s = a[r];
            for i in 0..row.len() {
                row[i] += s * b[i];
            }
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector { data: vec![0.0; len] }
    }

    pub fn ones(len: usize) -> Self {
        Vector { data: vec![1.0; len] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Vector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::dim(
                "dot",
                format!("lengths {} and {}", self.len(), other.len()),
            ));
        }
        Ok(dot(self.as_slice(), other.as_slice()))
    }

    pub fn add(&self, other: &Vector) -> Result<Vector> {
        self.zip_with("add", other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Vector) -> Result<Vector> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    fn zip_with(&self, op: &'static str, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Result<Vector> {
        if self.len() != other.len() {
            return Err(Error::dim(op, format!("lengths {} and {}", self.len(), other.len())));
        }
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(v: &Vector) -> Vector {
    Vector::from_vec(v.as_slice().iter().map(|&x| sigmoid_scalar(x)).collect())
}

pub fn tanh(v: &Vector) -> Vector {
    Vector::from_vec(v.as_slice().iter().map(|&x| x.tanh()).collect())
}

pub fn relu(v: &Vector) -> Vector {
    Vector::from_vec(v.as_slice().iter().map(|&x| x.max(0.0)).collect())
}

/// Softmax with max-subtraction; output sums to 1 and preserves ranking.
pub fn softmax(v: &Vector) -> Vector {
    softmax_slice(v.as_slice())
}

pub(crate) fn softmax_slice(v: &[f64]) -> Vector {
    let max = v.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for x in &mut out {
        *x /= total;
    }
    Vector::from_vec(out)
}

/// Uniform initialization over [lo, hi).
pub fn uniform_init(len: usize, lo: f64, hi: f64, rng: &mut Rng) -> Result<Vector> {
    if lo >= hi {
        return Err(Error::InvalidArgument(format!(
            "uniform_init requires lo < hi, got [{lo}, {hi})"
        )));
    }
    Ok(Vector::from_vec((0..len).map(|_| rng.uniform(lo, hi)).collect()))
}

/// Orthonormal factor of a random Gaussian matrix.
///
/// Draws rows×cols standard normal samples, computes the SVD by one-sided
/// Jacobi rotations, and returns U·Vᵀ. Columns are orthonormal when
/// rows ≥ cols, rows otherwise.
pub fn orthonormal_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    assert!(rows >= 1 && cols >= 1, "orthonormal_init needs positive dimensions");
    let mut gauss = Matrix::zeros(rows, cols);
    for x in gauss.as_mut_slice() {
        *x = rng.normal();
    }
    if rows >= cols {
        orthonormal_factor_tall(&gauss)
    } else {
        orthonormal_factor_tall(&gauss.transpose()).transpose()
    }
}

/// U·Vᵀ for a tall (rows ≥ cols) matrix via one-sided Jacobi.
///
/// Rotations applied on the right orthogonalize the columns: A·P = U·Σ.
/// Normalizing the columns gives U, and Q = U·Pᵀ.
fn orthonormal_factor_tall(a: &Matrix) -> Matrix {
    let rows = a.rows();
    let cols = a.cols();
    // Column-major working copies keep the rotations cache-friendly.
    let mut col: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| a.get(r, c)).collect())
        .collect();
    let mut p: Vec<Vec<f64>> = (0..cols)
        .map(|c| {
            let mut e = vec![0.0; cols];
            e[c] = 1.0;
            e
        })
        .collect();

    let tol = 1e-14;
    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for i in 0..cols {
            for j in (i + 1)..cols {
                let alpha = dot(&col[i], &col[i]);
                let beta = dot(&col[j], &col[j]);
                let gamma = dot(&col[i], &col[j]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                // Jacobi rotation zeroing the (i, j) inner product.
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let vi = col[i][r];
                    let vj = col[j][r];
                    col[i][r] = c * vi - s * vj;
                    col[j][r] = s * vi + c * vj;
                }
                for r in 0..cols {
                    let pi = p[i][r];
                    let pj = p[j][r];
                    p[i][r] = c * pi - s * pj;
                    p[j][r] = s * pi + c * pj;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    // Normalize columns to get U; Gaussian inputs are full rank a.s. but
    // guard the degenerate direction anyway.
    for c in col.iter_mut() {
        let norm = dot(c, c).sqrt();
        if norm > 1e-300 {
            for x in c.iter_mut() {
                *x /= norm;
            }
        }
    }

    // Q = U·Pᵀ, i.e. Q[r][c2] = Σ_k U[r][k]·P[c2][k].
    let mut q = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let out = q.row_mut(r);
        for k in 0..cols {
            let u_rk = col[k][r];
            for (c2, out_v) in out.iter_mut().enumerate() {
                *out_v += u_rk * p[c2][k];
            }
        }
    }
    q
}
