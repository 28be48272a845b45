//! Dense row-major matrices and the few factorizations the rest of the crate
//! needs: Cholesky (with bordered extension), triangular solves, Householder QR
//! and one-sided Jacobi SVD.
//!
//! Everything here is single-threaded and deterministic: the same inputs give
//! bit-identical outputs on one platform.

#![allow(clippy::needless_range_loop)]

use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of Jacobi sweeps before the SVD gives up.
const MAX_JACOBI_SWEEPS: usize = 80;

/// Relative tolerance on `a_p·a_q` below which a column pair counts as orthogonal.
const JACOBI_TOL: f64 = 1e-15;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(12) {
            write!(f, "  ")?;
            for c in 0..self.cols.min(12) {
                write!(f, "{:>11.4e} ", self[(r, c)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Panics if `data.len() != rows * cols`.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Self::from_fn(u.len(), v.len(), |r, c| u[r] * v[c])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self · other`.
    ///
    /// Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_acc(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul dimension mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "mul_vec dimension mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rows `rows`, columns `cols`, in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), cols.len(), |r, c| self[(rows[r], cols[c])])
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix { rows: rows.len(), cols: self.cols, data }
    }

    pub fn select_cols(&self, cols: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |r, c| self[(r, cols[c])])
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)]).abs());
            }
        }
        worst
    }

    /// `(A + Aᵀ)/2`; exact symmetry afterwards.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        let n = self.rows;
        for r in 0..n {
            for c in (r + 1)..n {
                let v = 0.5 * (self.data[r * n + c] + self.data[c * n + r]);
                self.data[r * n + c] = v;
                self.data[c * n + r] = v;
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `c += a · b` for row-major slices, `a` is `m×k`, `b` is `k×n`.
pub fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// Lower-triangular Cholesky factor of `A + ridge·I`.
#[derive(Clone, Debug, PartialEq)]
pub struct CholeskyFactor {
    lower: Matrix,
    ridge: f64,
}

impl CholeskyFactor {
    /// Factor of the empty (0×0) matrix; the starting point for [`chol_extend`].
    pub fn empty(ridge: f64) -> Self {
        CholeskyFactor { lower: Matrix::zeros(0, 0), ridge }
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Solves `L y = b` in place.
    pub fn forward_substitute(&self, b: &mut [f64]) {
        let n = self.dim();
        assert_eq!(b.len(), n);
        for i in 0..n {
            let row = self.lower.row(i);
            let s = dot(&row[..i], &b[..i]);
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_substitute(&self, y: &mut [f64]) {
        let n = self.dim();
        assert_eq!(y.len(), n);
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[(k, i)] * y[k];
            }
            y[i] = s / self.lower[(i, i)];
        }
    }

    /// Reconstructs `L Lᵀ` (the ridged input).
    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul(&self.lower.transpose())
    }
}

/// Cholesky factorization of `A + ridge·I`.
pub fn cholesky(a: &Matrix, ridge: f64) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::shape(format!("cholesky needs a square matrix, got {:?}", a.shape())));
    }
    let scale = a.max_abs().max(1.0);
    if a.asymmetry() > 1e-9 * scale {
        return Err(Error::shape("cholesky input is not symmetric"));
    }
    assert!(ridge >= 0.0, "ridge must be non-negative");
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + ridge;
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { index: j, pivot: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let s = a[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
            l[(i, j)] = s / djj;
        }
    }
    Ok(CholeskyFactor { lower: l, ridge })
}

/// Extends the factor of `A` to the factor of the bordered matrix
/// `[[A, c], [cᵀ, d]]`, keeping the same ridge.
pub fn chol_extend(f: &CholeskyFactor, new_col: &[f64], new_diag: f64) -> Result<CholeskyFactor> {
    let n = f.dim();
    if new_col.len() != n {
        return Err(Error::shape(format!(
            "chol_extend column has length {}, factor has dim {n}",
            new_col.len()
        )));
    }
    let mut l_row = new_col.to_vec();
    f.forward_substitute(&mut l_row);
    let pivot = new_diag + f.ridge - dot(&l_row, &l_row);
    if !(pivot > 0.0) {
        return Err(Error::NotPositiveDefinite { index: n, pivot });
    }
    let mut lower = Matrix::zeros(n + 1, n + 1);
    for r in 0..n {
        lower.row_mut(r)[..n].copy_from_slice(f.lower.row(r));
    }
    lower.row_mut(n)[..n].copy_from_slice(&l_row);
    lower[(n, n)] = pivot.sqrt();
    Ok(CholeskyFactor { lower, ridge: f.ridge })
}

/// Solves `(A + ridge·I) X = B`.
pub fn chol_solve(f: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    if b.rows() != f.dim() {
        return Err(Error::shape(format!(
            "chol_solve rhs has {} rows, factor has dim {}",
            b.rows(),
            f.dim()
        )));
    }
    let mut x = Matrix::zeros(b.rows(), b.cols());
    let mut col = vec![0.0; b.rows()];
    for c in 0..b.cols() {
        for r in 0..b.rows() {
            col[r] = b[(r, c)];
        }
        f.forward_substitute(&mut col);
        f.backward_substitute(&mut col);
        for r in 0..b.rows() {
            x[(r, c)] = col[r];
        }
    }
    Ok(x)
}

/// Thin singular value decomposition `M = U diag(s) Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `rows × r` with orthonormal columns, `r = min(rows, cols)`.
    pub u: Matrix,
    /// Descending, non-negative.
    pub s: Vec<f64>,
    /// `cols × r` with orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul(&self.v.transpose())
    }
}

/// Thin SVD via one-sided Jacobi rotations, preceded by a Householder QR
/// when the matrix is markedly tall.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::DegenerateData("svd input has non-finite entries".into()));
    }
    if m.rows() < m.cols() {
        let t = svd(&m.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    if m.rows() > 2 * m.cols() && m.cols() > 0 {
        let (q, r) = householder_qr(m);
        let inner = jacobi_svd_tall(&r)?;
        return Ok(Svd { u: q.matmul(&inner.u), s: inner.s, v: inner.v });
    }
    jacobi_svd_tall(m)
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn jacobi_svd_tall(m: &Matrix) -> Result<Svd> {
    let (rows, n) = m.shape();
    // Columns of M stored contiguously as rows of `at`.
    let mut at = m.transpose();
    let mut vt = Matrix::identity(n);
    let mut converged = n < 2;
    for _ in 0..MAX_JACOBI_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let ap = at.row(p);
                    let aq = at.row(q);
                    (dot(ap, ap), dot(aq, aq), dot(ap, aq))
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut at, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::NoConvergence { sweeps: MAX_JACOBI_SWEEPS });
    }

    let mut order: Vec<(f64, usize)> = (0..n).map(|j| (norm2(at.row(j)), j)).collect();
    // Stable descending sort keeps ties in column order.
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));

    let s: Vec<f64> = order.iter().map(|&(sv, _)| sv).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v = Matrix::zeros(n, n);
    for (k, &(sv, j)) in order.iter().enumerate() {
        for r in 0..n {
            v[(r, k)] = vt[(j, r)];
        }
        if sv > 0.0 && sv > smax * 1e-12 {
            u_cols.push(at.row(j).iter().map(|x| x / sv).collect());
        } else {
            u_cols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut u_cols, rows);
    let u = Matrix::from_fn(rows, n, |r, c| u_cols[c][r]);
    Ok(Svd { u, s, v })
}

fn rotate_rows(m: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = m.cols();
    let (head, tail) = m.as_mut_slice().split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let a = *x;
        let b = *y;
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills empty entries of `cols` with unit vectors orthogonal to all others
/// (Gram-Schmidt against the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], dim: usize) {
    let mut basis = 0;
    for k in 0..cols.len() {
        if !cols[k].is_empty() {
            continue;
        }
        loop {
            assert!(basis < dim, "cannot complete orthonormal basis");
            let mut cand = vec![0.0; dim];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(&cand, other);
                    for (x, o) in cand.iter_mut().zip(other) {
                        *x -= proj * o;
                    }
                }
            }
            let nrm = norm2(&cand);
            if nrm > 1e-8 {
                cand.iter_mut().for_each(|x| *x /= nrm);
                cols[k] = cand;
                break;
            }
        }
    }
}

/// Thin Householder QR of a matrix with `rows >= cols`: returns `(Q, R)` with
/// `Q` of shape `rows × cols` and `R` upper triangular `cols × cols`.
pub fn householder_qr(m: &Matrix) -> (Matrix, Matrix) {
    let (rows, n) = m.shape();
    assert!(rows >= n, "householder_qr needs rows >= cols");
    // Work on columns stored as rows.
    let mut at = m.transpose();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let x = &at.row(k)[k..];
        let alpha = norm2(x);
        let mut v = x.to_vec();
        if alpha == 0.0 {
            vs.push(Vec::new());
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vn = norm2(&v);
        v.iter_mut().for_each(|e| *e /= vn);
        for j in k..n {
            let col = &mut at.row_mut(j)[k..];
            let proj = 2.0 * dot(col, &v);
            for (c, e) in col.iter_mut().zip(&v) {
                *c -= proj * e;
            }
        }
        vs.push(v);
    }
    let r = Matrix::from_fn(n, n, |i, j| if i <= j { at[(j, i)] } else { 0.0 });
    // Q = H_0 H_1 ... H_{n-1} applied to the first n unit vectors.
    let mut qt = Matrix::zeros(n, rows);
    for j in 0..n {
        qt[(j, j)] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &vs[k];
        if v.is_empty() {
            continue;
        }
        for j in 0..n {
            let col = &mut qt.row_mut(j)[k..];
            let proj = 2.0 * dot(col, v);
            for (c, e) in col.iter_mut().zip(v) {
                *c -= proj * e;
            }
        }
    }
    (qt.transpose(), r)
}
