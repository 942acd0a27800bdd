//! Dense row-major `f64` matrices and the handful of kernels the spectral
//! pipeline and the toy trainer need.
//!
//! The SVD is delegated to nalgebra's Golub-Kahan implementation; everything
//! else is plain loops over contiguous rows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense matrix of 64-bit floats stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting empty dimensions, a
    /// length mismatch, or non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix(format!(
                "dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols,
                pos % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    /// Convenience constructor from nested rows; panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        assert!(!rows.is_empty() && cols > 0, "matrix dimensions must be positive");
        Self {
            rows: rows.len(),
            cols,
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, other: &Matrix, c: f64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Stacks `times` copies of `self` vertically.
    pub fn repeat_rows(&self, times: usize) -> Matrix {
        assert!(times > 0);
        Matrix {
            rows: self.rows * times,
            cols: self.cols,
            data: self.data.repeat(times),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`, the natural product for `(out, in)` weight matrices applied to
/// row vectors.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`, used for weight gradients.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let br = b.row(k);
        for (i, &aki) in a.row(k).iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(br) {
                *o += aki * bkj;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Thin singular value decomposition `a = U · diag(s) · Vᵀ`.
///
/// `u` is `rows x k`, `v` is `cols x k` with `k = min(rows, cols)`, and `s`
/// is sorted non-increasing.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows {
            for (x, s) in us.row_mut(i).iter_mut().zip(&self.s) {
                *x *= s;
            }
        }
        matmul_nt(&us, &self.v).expect("thin SVD factors conform")
    }
}

fn check_svd_input(a: &Matrix, label: &str) -> Result<()> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::InvalidMatrix(format!("cannot take the SVD of empty {label}")));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite(label.to_string()));
    }
    Ok(())
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    svd_labeled(a, "matrix")
}

/// As [`svd`], with `label` naming the matrix in error reports.
pub fn svd_labeled(a: &Matrix, label: &str) -> Result<Svd> {
    check_svd_input(a, label)?;
    let na = a.to_nalgebra();
    // max_niter = 0 lets nalgebra iterate until convergence or its own
    // failure detection.
    let dec = nalgebra::linalg::SVD::try_new(na, true, true, f64::EPSILON, 0).ok_or_else(|| {
        Error::SvdDidNotConverge {
            label: label.to_string(),
            rows: a.rows,
            cols: a.cols,
        }
    })?;
    let u = dec.u.as_ref().expect("requested U");
    let v_t = dec.v_t.as_ref().expect("requested Vt");
    let k = dec.singular_values.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&x, &y| dec.singular_values[y].total_cmp(&dec.singular_values[x]));

    let s = order.iter().map(|&i| dec.singular_values[i].max(0.0)).collect();
    let u = Matrix::from_fn(a.rows, k, |i, j| u[(i, order[j])]);
    let v = Matrix::from_fn(a.cols, k, |i, j| v_t[(order[j], i)]);
    Ok(Svd { u, s, v })
}

/// Singular values only, sorted non-increasing. Much cheaper than a full
/// [`svd`] since no singular vectors are accumulated.
pub fn singular_values(a: &Matrix, label: &str) -> Result<Vec<f64>> {
    check_svd_input(a, label)?;
    let dec = nalgebra::linalg::SVD::try_new(a.to_nalgebra(), false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::SvdDidNotConverge {
            label: label.to_string(),
            rows: a.rows,
            cols: a.cols,
        })?;
    let mut s: Vec<f64> = dec.singular_values.iter().map(|v| v.max(0.0)).collect();
    s.sort_by(|x, y| y.total_cmp(x));
    Ok(s)
}

/// Orthonormalizes the columns of a tall `g` (rows >= cols) by QR, fixing
/// signs so `diag(R) > 0`. For a square Gaussian `g` the result is
/// Haar-distributed.
pub fn orthonormal_columns(g: &Matrix) -> Matrix {
    assert!(g.rows >= g.cols, "need rows >= cols");
    let qr = g.to_nalgebra().qr();
    let q = qr.q();
    let r = qr.r();
    let mut out = Matrix::from_nalgebra(&q);
    for j in 0..out.cols {
        if r[(j, j)] < 0.0 {
            for i in 0..out.rows {
                let v = out.get(i, j);
                out.set(i, j, -v);
            }
        }
    }
    out
}
