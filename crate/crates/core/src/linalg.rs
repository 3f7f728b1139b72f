//! Dense linear algebra for the small systems that show up in LSTD.
//!
//! Everything here is row-major `f64` and sized for `d` up to about a hundred:
//! partial-pivot elimination, explicit inverses, in-place rank-one updates and
//! Sherman-Morrison maintenance of an inverse under those updates.

use std::fmt;
use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute pivot magnitude below which a system is reported as singular.
pub const PIVOT_TOL: f64 = 1e-12;

/// Smallest admissible `|1 + vᵀ A⁻¹ u|` for a Sherman-Morrison step.
pub const SM_DENOMINATOR_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum LinalgError {
    #[error("singular system: pivot {magnitude:e} in column {column}")]
    SingularSystem { column: usize, magnitude: f64 },
    #[error("Sherman-Morrison denominator {value:e} is too close to zero")]
    DenominatorNearZero { value: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("ragged rows: row {row} has {found} entries, expected {expected}")]
    Ragged { row: usize, expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch { expected, found })
    }
}

/// Dense real vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Max-magnitude entry (0 for the empty vector).
    pub fn norm_inf(&self) -> f64 {
        norm_inf(&self.0)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Self(v.to_vec())
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// `y += a * x`
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != n_cols {
                return Err(LinalgError::Ragged { row: i, expected: n_cols, found: row.len() });
            }
            data.extend(row);
        }
        Ok(Self { rows: n_rows, cols: n_cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        check_dim(self.rows, other.rows)?;
        check_dim(self.cols, other.cols)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        check_dim(self.cols, other.rows)?;
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(k), out.row_mut(i));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        check_dim(self.cols, x.len())?;
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    /// `out = self · x` without allocating.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.cols, x.len());
        debug_assert_eq!(self.rows, out.len());
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(i), x);
        }
    }

    /// `out = xᵀ · self` without allocating.
    pub fn vecmat_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(self.rows, x.len());
        debug_assert_eq!(self.cols, out.len());
        out.fill(0.0);
        for (i, &xi) in x.iter().enumerate() {
            axpy(xi, self.row(i), out);
        }
    }

    /// In-place `self += scale · u vᵀ`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(self.rows, u.len());
        debug_assert_eq!(self.cols, v.len());
        for (i, &ui) in u.iter().enumerate() {
            let s = scale * ui;
            if s != 0.0 {
                axpy(s, v, self.row_mut(i));
            }
        }
    }

    pub fn add_diag(&mut self, alpha: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += alpha;
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        norm_inf(&self.data)
    }

    /// Induced ∞-norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = LinalgError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(rows)
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:>12.6}")).collect();
            writeln!(f, "[{}]", row.join(" "))?;
        }
        Ok(())
    }
}

/// LU factorization with partial (row) pivoting, `P·A = L·U`.
///
/// `L` has a unit diagonal and is stored below the diagonal of `lu`.
#[derive(Clone, Debug)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Matrix) -> Result<Self> {
        let mut lu = a.clone();
        let mut perm = Vec::new();
        factor_in_place(&mut lu, &mut perm)?;
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vector> {
        check_dim(self.dim(), b.len())?;
        let mut x = Vector::zeros(self.dim());
        substitute(&self.lu, &self.perm, b, &mut x);
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            substitute(&self.lu, &self.perm, &e, &mut col);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

fn factor_in_place(lu: &mut Matrix, perm: &mut Vec<usize>) -> Result<()> {
    let n = lu.rows;
    perm.clear();
    perm.extend(0..n);
    for k in 0..n {
        let (p, magnitude) = (k..n)
            .map(|i| (i, lu[(i, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if magnitude.is_nan() || magnitude < PIVOT_TOL {
            return Err(LinalgError::SingularSystem { column: k, magnitude });
        }
        if p != k {
            for j in 0..n {
                lu.data.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
        }
        let pivot = lu[(k, k)];
        for i in k + 1..n {
            let factor = lu[(i, k)] / pivot;
            lu[(i, k)] = factor;
            if factor != 0.0 {
                let (upper, lower) = lu.data.split_at_mut(i * n);
                let pivot_row = &upper[k * n + k + 1..k * n + n];
                axpy(-factor, pivot_row, &mut lower[k + 1..n]);
            }
        }
    }
    Ok(())
}

fn substitute(lu: &Matrix, perm: &[usize], b: &[f64], x: &mut [f64]) {
    let n = lu.rows;
    for i in 0..n {
        let row = lu.row(i);
        x[i] = b[perm[i]] - dot(&row[..i], &x[..i]);
    }
    for i in (0..n).rev() {
        let row = lu.row(i);
        x[i] = (x[i] - dot(&row[i + 1..], &x[i + 1..])) / row[i];
    }
}

/// Reusable scratch space for repeated regularized solves of the same size.
#[derive(Clone, Debug)]
pub struct SolveWorkspace {
    lu: Matrix,
    perm: Vec<usize>,
}

impl SolveWorkspace {
    pub fn new(d: usize) -> Self {
        Self { lu: Matrix::zeros(d, d), perm: Vec::with_capacity(d) }
    }

    /// Solves `(a + alpha·I) x = b` into `out`.
    pub fn solve_regularized_into(
        &mut self,
        a: &Matrix,
        b: &[f64],
        alpha: f64,
        out: &mut [f64],
    ) -> Result<()> {
        check_dim(a.rows, a.cols)?;
        check_dim(a.rows, b.len())?;
        check_dim(a.rows, out.len())?;
        if self.lu.rows != a.rows {
            self.lu = Matrix::zeros(a.rows, a.rows);
        }
        self.lu.data.copy_from_slice(&a.data);
        self.lu.add_diag(alpha);
        factor_in_place(&mut self.lu, &mut self.perm)?;
        substitute(&self.lu, &self.perm, b, out);
        Ok(())
    }
}

/// Solves `(A + alpha·I) θ = b` by partial-pivot elimination.
pub fn solve_regularized(a: &Matrix, b: &[f64], alpha: f64) -> Result<Vector> {
    let mut ws = SolveWorkspace::new(a.rows);
    let mut out = Vector::zeros(b.len());
    ws.solve_regularized_into(a, b, alpha, &mut out)?;
    Ok(out)
}

/// Returns `A + u vᵀ`.
pub fn rank_one_update(a: &Matrix, u: &[f64], v: &[f64]) -> Result<Matrix> {
    check_dim(a.rows, u.len())?;
    check_dim(a.cols, v.len())?;
    let mut out = a.clone();
    out.add_outer(1.0, u, v);
    Ok(out)
}

/// Given `A⁻¹`, returns `(A + u vᵀ)⁻¹`.
pub fn sherman_morrison(a_inv: &Matrix, u: &[f64], v: &[f64]) -> Result<Matrix> {
    check_dim(a_inv.rows, a_inv.cols)?;
    check_dim(a_inv.rows, u.len())?;
    check_dim(a_inv.rows, v.len())?;
    let mut out = a_inv.clone();
    let mut scratch = ShermanMorrisonScratch::new(a_inv.rows);
    scratch.update(&mut out, u, v)?;
    Ok(out)
}

/// Buffers for in-place Sherman-Morrison updates.
#[derive(Clone, Debug)]
pub struct ShermanMorrisonScratch {
    inv_u: Vec<f64>,
    vt_inv: Vec<f64>,
}

impl ShermanMorrisonScratch {
    pub fn new(d: usize) -> Self {
        Self { inv_u: vec![0.0; d], vt_inv: vec![0.0; d] }
    }

    /// Replaces `a_inv` with `(A + u vᵀ)⁻¹`. On error `a_inv` is untouched.
    pub fn update(&mut self, a_inv: &mut Matrix, u: &[f64], v: &[f64]) -> Result<()> {
        self.update_scaled(a_inv, 1.0, u, v)
    }

    /// Replaces `a_inv` with `(A + s·u vᵀ)⁻¹`.
    pub fn update_scaled(&mut self, a_inv: &mut Matrix, s: f64, u: &[f64], v: &[f64]) -> Result<()> {
        a_inv.matvec_into(u, &mut self.inv_u);
        a_inv.vecmat_into(v, &mut self.vt_inv);
        let denom = 1.0 + s * dot(v, &self.inv_u);
        if denom.is_nan() || denom.abs() < SM_DENOMINATOR_TOL {
            return Err(LinalgError::DenominatorNearZero { value: denom });
        }
        a_inv.add_outer(-s / denom, &self.inv_u, &self.vt_inv);
        Ok(())
    }
}

/// Returns `A⁻¹`.
pub fn linear_system_inverse(a: &Matrix) -> Result<Matrix> {
    check_dim(a.rows, a.cols)?;
    Ok(Lu::factor(a)?.inverse())
}
