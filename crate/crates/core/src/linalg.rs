//! Dense real linear algebra on row-major `f64` matrices.
//!
//! Everything the curvature code needs lives here: Kronecker products, the
//! column-stacking `vec` operator, LU solves and symmetric eigenvalues. The
//! factorizations are delegated to `nalgebra`; the rest is plain loops so the
//! summation order is fixed and results are reproducible bit for bit.

use std::fmt;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Pivots smaller than this fraction of the largest entry count as zero.
pub const SINGULAR_RELATIVE_THRESHOLD: f64 = 1e-12;

/// Relative asymmetry accepted by the symmetric eigensolver.
pub const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// A dense row-major matrix of 64-bit floats.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
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

    /// Builds a matrix from equally sized rows.
    ///
    /// # Panics
    /// If the rows have different lengths.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A single column.
    pub fn column(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_col(&mut self, c: usize, v: &[f64]) {
        debug_assert_eq!(v.len(), self.rows);
        for (r, &x) in v.iter().enumerate() {
            self[(r, c)] = x;
        }
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Matrix product.
    ///
    /// # Panics
    /// If the inner dimensions disagree.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * v`, summed left to right along each row.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec: {}x{} times {}", self.rows, self.cols, v.len());
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ * v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_t: ({}x{})ᵀ times {}", self.rows, self.cols, v.len());
        let mut out = vec![0.0; self.cols];
        for (r, &x) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * x;
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { data, ..*self }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { data, ..*self }
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|a| alpha * a).collect(),
            ..*self
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += u vᵀ`.
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        assert_eq!((self.rows, self.cols), (u.len(), v.len()));
        for (r, &x) in u.iter().enumerate() {
            for (o, &y) in self.row_mut(r).iter_mut().zip(v) {
                *o += x * y;
            }
        }
    }

    /// `self + lambda * I`.
    pub fn add_diag(&self, lambda: f64) -> Matrix {
        assert!(self.is_square());
        let mut m = self.clone();
        for i in 0..self.rows {
            m[(i, i)] += lambda;
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies the `rows x cols` block whose top-left corner is `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        for r in 0..block.rows {
            for c in 0..block.cols {
                self[(r0 + r, c0 + c)] = block[(r, c)];
            }
        }
    }

    /// Largest relative entrywise asymmetry `max|a_ij - a_ji| / max|a|`.
    pub fn asymmetry(&self) -> f64 {
        assert!(self.is_square());
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// `(self + selfᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |r, c| 0.5 * (self[(r, c)] + self[(c, r)]))
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |r, c| m[(r, c)])
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

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}

pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(u.len(), v.len());
    m.add_outer(u, v);
    m
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Kronecker product: block `(i, j)` of the result is `b[i, j] * c`.
pub fn kron(b: &Matrix, c: &Matrix) -> Matrix {
    let rows = b.rows * c.rows;
    let cols = b.cols * c.cols;
    let mut out = Matrix::zeros(rows, cols);
    for bi in 0..b.rows {
        for bj in 0..b.cols {
            let s = b[(bi, bj)];
            if s == 0.0 {
                continue;
            }
            for ci in 0..c.rows {
                let dst = (bi * c.rows + ci) * cols + bj * c.cols;
                for (o, &x) in out.data[dst..dst + c.cols].iter_mut().zip(c.row(ci)) {
                    *o = s * x;
                }
            }
        }
    }
    out
}

/// Stacks the columns of `m` top to bottom.
pub fn vec(m: &Matrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.rows * m.cols);
    for c in 0..m.cols {
        for r in 0..m.rows {
            out.push(m[(r, c)]);
        }
    }
    out
}

/// Inverse of [`vec`] for a known shape.
pub fn unvec(v: &[f64], rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return shape_err(format!("cannot unvec {} entries into {rows}x{cols}", v.len()));
    }
    Ok(Matrix::from_fn(rows, cols, |r, c| v[c * rows + r]))
}

/// Solves `a * x = rhs` by LU with partial pivoting.
pub fn solve(a: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return shape_err(format!("solve: coefficient matrix is {}x{}", a.rows, a.cols));
    }
    if rhs.rows != a.rows {
        return shape_err(format!(
            "solve: {}x{} system with {} right-hand rows",
            a.rows, a.cols, rhs.rows
        ));
    }
    if a.rows == 0 {
        return Ok(rhs.clone());
    }
    let scale = a.max_abs();
    let lu = a.to_nalgebra().lu();
    let pivot = lu.u().diagonal().iter().fold(f64::INFINITY, |m, p| m.min(p.abs()));
    if !(pivot >= SINGULAR_RELATIVE_THRESHOLD * scale) || scale == 0.0 {
        return Err(Error::SingularMatrix { pivot, scale });
    }
    let x = lu
        .solve(&rhs.to_nalgebra())
        .ok_or(Error::SingularMatrix { pivot, scale })?;
    let x = Matrix::from_nalgebra(&x);
    if !x.is_finite() {
        return Err(Error::SingularMatrix { pivot, scale });
    }
    Ok(x)
}

pub fn solve_vec(a: &Matrix, rhs: &[f64]) -> Result<Vec<f64>> {
    Ok(solve(a, &Matrix::column(rhs))?.into_data())
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    solve(a, &Matrix::identity(a.rows))
}

/// Eigen-decomposition of a symmetric matrix: eigenvalues in ascending order
/// and the matching orthonormal eigenvectors as columns.
pub fn sym_eig(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !a.is_square() {
        return shape_err(format!("sym_eig: {}x{} is not square", a.rows, a.cols));
    }
    let asymmetry = a.asymmetry();
    if asymmetry > SYMMETRY_TOLERANCE {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let eig = a.symmetrized().to_nalgebra().symmetric_eigen();
    let mut order: Vec<usize> = (0..a.rows).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Matrix::from_fn(a.rows, a.rows, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_eig_min(a: &Matrix) -> Result<f64> {
    let (values, _) = sym_eig(a)?;
    Ok(values.first().copied().unwrap_or(f64::INFINITY))
}

/// Orthonormal basis for the column space of a square nonsingular matrix,
/// with signs fixed so the triangular factor has a positive diagonal.
pub fn orthonormalize(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return shape_err("orthonormalize needs a square matrix");
    }
    let qr = m.to_nalgebra().qr();
    let (q, r) = (qr.q(), qr.r());
    let mut out = Matrix::from_nalgebra(&q);
    for c in 0..m.cols {
        if r[(c, c)] == 0.0 {
            return Err(Error::SingularMatrix { pivot: 0.0, scale: m.max_abs() });
        }
        if r[(c, c)] < 0.0 {
            for row in 0..m.rows {
                out[(row, c)] = -out[(row, c)];
            }
        }
    }
    Ok(out)
}

/// `‖(b ⊗ c)⁻¹ − b⁻¹ ⊗ c⁻¹‖_∞`, the entrywise gap between inverting a
/// Kronecker product densely and inverting its factors.
pub fn kron_inverse_check(b: &Matrix, c: &Matrix) -> Result<f64> {
    let dense = inverse(&kron(b, c))?;
    let factored = kron(&inverse(b)?, &inverse(c)?);
    Ok(dense.sub(&factored).max_abs())
}
