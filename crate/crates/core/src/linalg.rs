//! Small dense linear algebra: row-major matrices, LU solves, Householder
//! least squares with a minimum-norm fallback, and Cholesky.
//!
//! Everything here is sized for the handful-of-classes problems this crate
//! deals with; nothing is blocked or vectorized.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension("row-major data length"));
        }
        Ok(Self { rows, cols, data })
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

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// `self * x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self' * x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension("matrix product"));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
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

pub fn norm2(x: &[f64]) -> f64 {
    libm::sqrt(x.iter().map(|v| v * v).sum())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves the square system `a x = b` by LU with partial pivoting.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(Error::Dimension("square solve"));
    }
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = m.as_slice().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    for k in 0..n {
        let (piv, pmax) = (k..n)
            .map(|i| (i, m[(i, k)].abs()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pmax <= f64::EPSILON * scale * n as f64 || pmax == 0.0 {
            return Err(Error::Singular);
        }
        if piv != k {
            for j in 0..n {
                let tmp = m[(k, j)];
                m[(k, j)] = m[(piv, j)];
                m[(piv, j)] = tmp;
            }
            x.swap(k, piv);
        }
        for i in k + 1..n {
            let f = m[(i, k)] / m[(k, k)];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[(i, j)] -= f * m[(k, j)];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|j| m[(k, j)] * x[j]).sum();
        x[k] = (x[k] - s) / m[(k, k)];
    }
    Ok(x)
}

/// Outcome of [`least_squares`].
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub solution: Vec<f64>,
    /// Numerical rank detected by the pivoted QR.
    pub rank: usize,
    /// `‖A x − b‖₂` evaluated against the original data.
    pub residual: f64,
}

impl LeastSquares {
    pub fn rank_deficient(&self, cols: usize) -> bool {
        self.rank < cols
    }
}

/// Householder reflector stored as (v, tau) with `H = I − tau v v'`, `v[0] = 1`.
#[derive(Debug, Clone)]
struct Reflector {
    v: Vec<f64>,
    tau: f64,
}

impl Reflector {
    /// Reflector mapping `x` onto `beta e1`, returned together with `beta`.
    fn new(x: &[f64]) -> (Self, f64) {
        let alpha = x[0];
        let tail: f64 = x[1..].iter().map(|v| v * v).sum();
        let mut v = x.to_vec();
        v[0] = 1.0;
        if tail == 0.0 {
            return (Self { v, tau: 0.0 }, alpha);
        }
        let norm = libm::sqrt(alpha * alpha + tail);
        let beta = if alpha <= 0.0 { norm } else { -norm };
        let v0 = alpha - beta;
        for e in v[1..].iter_mut() {
            *e /= v0;
        }
        let tau = (beta - alpha) / beta;
        (Self { v, tau }, beta)
    }

    /// Applies `H` in place; `y` must have the reflector's length.
    fn apply(&self, y: &mut [f64]) {
        if self.tau == 0.0 {
            return;
        }
        let s = self.tau * dot(&self.v, y);
        for (yi, vi) in y.iter_mut().zip(&self.v) {
            *yi -= s * vi;
        }
    }
}

/// Minimizes `‖A x − b‖₂`, returning the minimum-norm minimizer when `A` is
/// rank deficient.
///
/// Householder QR with column pivoting determines the rank; a deficient `R`
/// is reduced further by a second QR of its leading rows (complete orthogonal
/// decomposition). The sequence of floating-point operations is fixed, so the
/// result is reproducible bit for bit.
pub fn least_squares(a: &Matrix, b: &[f64]) -> Result<LeastSquares> {
    let (m, n) = (a.rows(), a.cols());
    if b.len() != m {
        return Err(Error::Dimension("least-squares right-hand side"));
    }
    // Column-major working copy makes column operations contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[(i, j)]).collect()).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut qb = b.to_vec();
    let steps = m.min(n);
    let mut diag = Vec::with_capacity(steps);

    for k in 0..steps {
        let (p, _) = (k..n)
            .map(|j| (j, cols[j][k..].iter().map(|v| v * v).sum::<f64>()))
            .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        cols.swap(k, p);
        perm.swap(k, p);
        let (h, beta) = Reflector::new(&cols[k][k..]);
        cols[k][k] = beta;
        for e in cols[k][k + 1..].iter_mut() {
            *e = 0.0;
        }
        for col in cols.iter_mut().skip(k + 1) {
            h.apply(&mut col[k..]);
        }
        h.apply(&mut qb[k..]);
        diag.push(beta);
    }

    let lead = diag.first().map_or(0.0, |d| d.abs());
    let tol = lead * f64::EPSILON * (m.max(n) as f64) * 10.0;
    let rank = diag.iter().take_while(|d| d.abs() > tol && lead > 0.0).count();

    let mut x_perm = vec![0.0; n];
    if rank == n {
        for k in (0..n).rev() {
            let s: f64 = (k + 1..n).map(|j| cols[j][k] * x_perm[j]).sum();
            x_perm[k] = (qb[k] - s) / cols[k][k];
        }
    } else if rank > 0 {
        // T = R[0..rank, 0..n]; factor T' = Q2 [L; 0].
        let mut tt: Vec<Vec<f64>> = (0..rank).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect();
        let mut reflectors = Vec::with_capacity(rank);
        for k in 0..rank {
            let (h, beta) = Reflector::new(&tt[k][k..]);
            tt[k][k] = beta;
            for e in tt[k][k + 1..].iter_mut() {
                *e = 0.0;
            }
            for col in tt.iter_mut().skip(k + 1) {
                h.apply(&mut col[k..]);
            }
            reflectors.push(h);
        }
        // T x = L' (Q2' x); solve L' t = qb[0..rank] by forward substitution.
        let mut t = vec![0.0; n];
        for i in 0..rank {
            let s: f64 = (0..i).map(|j| tt[i][j] * t[j]).sum();
            t[i] = (qb[i] - s) / tt[i][i];
        }
        for (k, h) in reflectors.iter().enumerate().rev() {
            h.apply(&mut t[k..]);
        }
        x_perm = t;
    }

    let mut solution = vec![0.0; n];
    for (j, &pj) in perm.iter().enumerate() {
        solution[pj] = x_perm[j];
    }
    let ax = a.mul_vec(&solution);
    let resid: Vec<f64> = ax.iter().zip(b).map(|(u, v)| u - v).collect();
    Ok(LeastSquares {
        solution,
        rank,
        residual: norm2(&resid),
    })
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix,
/// or `None` when a pivot is not positive.
pub fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let s: f64 = (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum();
        let d = a[(j, j)] - s;
        if !(d > 0.0) {
            return None;
        }
        let djj = libm::sqrt(d);
        l[(j, j)] = djj;
        for i in j + 1..n {
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            l[(i, j)] = (a[(i, j)] - s) / djj;
        }
    }
    Some(l)
}
