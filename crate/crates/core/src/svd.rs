//! Small dense matrices and a one-sided Jacobi SVD.
//!
//! Jacobi suits this crate: the matrices are tiny, the correctness argument
//! is short, and it needs no external dependency. Columns of the working
//! matrix are rotated until they are pairwise orthogonal; their norms are the
//! singular values.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch {
                expected: format!("{c} columns"),
                actual: "ragged rows".into(),
            });
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        Matrix {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.next_gaussian()).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[r] += self.get(r, c) * x[c];
            }
        }
        out
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    /// `U diag(s) V^T`, optionally truncated to the first `rank` terms.
    pub fn reconstruct(&self, rank: usize) -> Matrix {
        let m = self.u.rows();
        let n = self.v.rows();
        let mut out = Matrix::zeros(m, n);
        for k in 0..rank.min(self.singular_values.len()) {
            let s = self.singular_values[k];
            for r in 0..m {
                let us = self.u.get(r, k) * s;
                for c in 0..n {
                    out.data[r * n + c] += us * self.v.get(c, k);
                }
            }
        }
        out
    }
}

const JACOBI_REL_TOL: f64 = 1e-14;
const JACOBI_ABS_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 64;

/// One-sided Jacobi SVD. Singular values are returned in descending order;
/// `a == u * diag(s) * v^T` with orthonormal column blocks.
pub fn svd(a: &Matrix) -> Svd {
    let transposed = a.rows < a.cols;
    let mut w = if transposed { a.transpose() } else { a.clone() };
    let n = w.cols;
    let mut v = Matrix::identity(n);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut converged = true;
        for i in 0..n.saturating_sub(1) {
            for j in (i + 1)..n {
                let (aii, ajj, aij) = column_moments(&w, i, j);
                // Converged pairs: off-diagonal negligible against both
                // column norms, or absolutely tiny.
                if aij * aij <= JACOBI_REL_TOL * JACOBI_REL_TOL * aii * ajj
                    || aij.abs() <= JACOBI_ABS_TOL * JACOBI_ABS_TOL
                {
                    continue;
                }
                converged = false;
                let zeta = (ajj - aii) / (2.0 * aij);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut w, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        if converged {
            break;
        }
    }

    // Column norms are the singular values; normalize into U.
    let mut order: Vec<usize> = (0..n).collect();
    let mut sigma = vec![0.0; n];
    for k in 0..n {
        let norm: f64 = (0..w.rows).map(|r| w.get(r, k) * w.get(r, k)).sum::<f64>().sqrt();
        sigma[k] = norm;
    }
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));

    let mut u = Matrix::zeros(w.rows, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut s_sorted = vec![0.0; n];
    for (new_k, &old_k) in order.iter().enumerate() {
        let s = sigma[old_k];
        s_sorted[new_k] = s;
        for r in 0..w.rows {
            let val = if s > 0.0 { w.get(r, old_k) / s } else { 0.0 };
            u.set(r, new_k, val);
        }
        for r in 0..n {
            v_sorted.set(r, new_k, v.get(r, old_k));
        }
    }

    if transposed {
        Svd {
            u: v_sorted,
            singular_values: s_sorted,
            v: u,
        }
    } else {
        Svd {
            u,
            singular_values: s_sorted,
            v: v_sorted,
        }
    }
}

fn column_moments(w: &Matrix, i: usize, j: usize) -> (f64, f64, f64) {
    let mut aii = 0.0;
    let mut ajj = 0.0;
    let mut aij = 0.0;
    for r in 0..w.rows {
        let wi = w.get(r, i);
        let wj = w.get(r, j);
        aii += wi * wi;
        ajj += wj * wj;
        aij += wi * wj;
    }
    (aii, ajj, aij)
}

fn rotate_columns(m: &mut Matrix, i: usize, j: usize, c: f64, s: f64) {
    for r in 0..m.rows {
        let mi = m.get(r, i);
        let mj = m.get(r, j);
        m.set(r, i, c * mi - s * mj);
        m.set(r, j, s * mi + c * mj);
    }
}

/// Best rank-`b` approximation in Frobenius norm: the truncated SVD.
pub fn best_rank_approx(a: &Matrix, b: usize) -> Result<Matrix> {
    let max_rank = a.rows.min(a.cols);
    if b == 0 || b > max_rank {
        return Err(Error::RankOutOfRange { rank: b, max: max_rank });
    }
    let decomp = svd(a);
    let numeric_rank = {
        let smax = decomp.singular_values.first().copied().unwrap_or(0.0);
        decomp
            .singular_values
            .iter()
            .filter(|&&s| s > 1e-12 * smax.max(1.0))
            .count()
    };
    if b > numeric_rank {
        return Err(Error::RankOutOfRange {
            rank: b,
            max: numeric_rank,
        });
    }
    Ok(decomp.reconstruct(b))
}
