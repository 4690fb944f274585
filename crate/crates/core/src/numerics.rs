//! Dense vectors and matrices for desk-scale problems.
//!
//! Both types reject NaN/Inf at construction, and every arithmetic operation
//! that could produce a non-finite entry returns [`Error::NonFinite`] instead.
//! Factorizations and eigenvalues are delegated to `nalgebra`.

use std::fmt;
use std::ops::Index;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative pivot threshold below which [`dense_solve`] reports a singular matrix.
pub const PIVOT_TOLERANCE: f64 = 1e-12;

fn check_finite(data: &[f64], context: &str) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// A non-empty vector of finite reals.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RealVector {
    data: Vec<f64>,
}

impl RealVector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty);
        }
        check_finite(&data, "vector construction")?;
        Ok(Self { data })
    }

    pub fn from_slice(data: &[f64]) -> Result<Self> {
        Self::new(data.to_vec())
    }

    /// Panics if `len == 0`.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "RealVector must be non-empty");
        Self {
            data: vec![0.0; len],
        }
    }

    /// Unit basis vector `e_index`.
    pub fn basis(len: usize, index: usize) -> Self {
        let mut v = Self::zeros(len);
        v.data[index] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        dot(self, other)
    }

    fn zip_with(&self, other: &Self, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::Dimension {
                context,
                expected: self.len(),
                found: other.len(),
            });
        }
        let data: Vec<f64> = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        check_finite(&data, context)?;
        Ok(Self { data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "vector add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "vector sub", |a, b| a - b)
    }

    /// `self + scale * other`
    pub fn axpy(&self, scale: f64, other: &Self) -> Result<Self> {
        self.zip_with(other, "vector axpy", |a, b| a + scale * b)
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|x| x * s).collect();
        check_finite(&data, "vector scale")?;
        Ok(Self { data })
    }

    /// Bitwise equality of every entry; distinguishes `0.0` from `-0.0`.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.len() == other.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.norm_inf())
    }
}

impl TryFrom<Vec<f64>> for RealVector {
    type Error = Error;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Self::new(data)
    }
}

impl From<RealVector> for Vec<f64> {
    fn from(v: RealVector) -> Self {
        v.data
    }
}

impl Index<usize> for RealVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl fmt::Debug for RealVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.data).finish()
    }
}

/// Row-major dense matrix of finite reals.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty);
        }
        if rows * cols != data.len() {
            return Err(Error::Dimension {
                context: "matrix construction",
                expected: rows * cols,
                found: data.len(),
            });
        }
        check_finite(&data, "matrix construction")?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension {
                context: "matrix rows",
                expected: cols,
                found: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(&vec![1.0; n]).expect("identity is finite and non-empty")
    }

    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            data[i * n + i] = d;
        }
        Self::new(n, n, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    pub fn matvec(&self, v: &RealVector) -> Result<RealVector> {
        matvec(self, v)
    }

    /// `selfᵀ · v`, i.e. the row-vector product `vᵀ · self`.
    pub fn transpose_matvec(&self, v: &RealVector) -> Result<RealVector> {
        if self.rows != v.len() {
            return Err(Error::Dimension {
                context: "transpose matvec",
                expected: self.rows,
                found: v.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(i)) {
                *o += m * vi;
            }
        }
        RealVector::new(out)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self.get(i, j) - self.get(j, i)).abs() <= tol))
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn symmetric_eigenvalues(&self) -> Result<Vec<f64>> {
        if !self.is_square() {
            return Err(Error::Dimension {
                context: "symmetric eigenvalues",
                expected: self.rows,
                found: self.cols,
            });
        }
        let mut ev: Vec<f64> = self.to_nalgebra().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        Ok(ev)
    }

    /// Largest singular value (operator 2-norm).
    pub fn spectral_norm(&self) -> f64 {
        let m = self.to_nalgebra();
        m.singular_values().iter().fold(0.0, |a: f64, &b| a.max(b))
    }

    /// Returns true if a Cholesky factorization succeeds.
    pub fn is_positive_definite(&self) -> bool {
        self.is_square() && self.to_nalgebra().cholesky().is_some()
    }
}

impl fmt::Debug for RealMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = (0..self.rows).map(|i| self.row(i)).collect();
        f.debug_list().entries(rows).finish()
    }
}

pub fn dot(a: &RealVector, b: &RealVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            context: "dot",
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum())
}

pub fn matvec(m: &RealMatrix, v: &RealVector) -> Result<RealVector> {
    if m.cols != v.len() {
        return Err(Error::Dimension {
            context: "matvec",
            expected: m.cols,
            found: v.len(),
        });
    }
    let out: Vec<f64> = (0..m.rows)
        .map(|i| m.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum())
        .collect();
    check_finite(&out, "matvec")?;
    Ok(RealVector { data: out })
}

/// Solves `m · x = rhs` by LU with partial pivoting plus one refinement step.
pub fn dense_solve(m: &RealMatrix, rhs: &RealVector) -> Result<RealVector> {
    if !m.is_square() {
        return Err(Error::Dimension {
            context: "dense_solve (square)",
            expected: m.rows,
            found: m.cols,
        });
    }
    if m.rows != rhs.len() {
        return Err(Error::Dimension {
            context: "dense_solve rhs",
            expected: m.rows,
            found: rhs.len(),
        });
    }
    let lu = m.to_nalgebra().lu();
    let threshold = PIVOT_TOLERANCE * m.max_abs();
    let u = lu.u();
    let min_pivot = u.diagonal().iter().fold(f64::INFINITY, |a, &p| a.min(p.abs()));
    if !(min_pivot > threshold) {
        return Err(Error::Singular {
            pivot: min_pivot,
            threshold,
        });
    }
    let b = DVector::from_column_slice(rhs.as_slice());
    let mut x = lu.solve(&b).ok_or(Error::Singular {
        pivot: min_pivot,
        threshold,
    })?;
    let residual = &b - m.to_nalgebra() * &x;
    if let Some(dx) = lu.solve(&residual) {
        x += dx;
    }
    RealVector::new(x.iter().copied().collect())
}
