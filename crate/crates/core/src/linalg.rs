//! Dense row-major matrices and Cholesky factorization.
//!
//! Small systems (the k×k neighbor blocks that dominate training) go through a
//! hand-written left-looking factorization; large dense systems (exact MLL,
//! data generation) are handed to `faer`, which is considerably faster there.

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GpError, Result};

/// Matrices at least this large are factorized with `faer`.
const LARGE_FACTOR_SIZE: usize = 192;

/// Relative diagonal jitter applied to kernel matrices, as a multiple of σ_K².
pub const BASE_JITTER: f64 = 1e-6;
/// Factor by which the jitter grows on the single retry.
pub const JITTER_ESCALATION: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dim(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
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

    /// New matrix holding the selected rows, in the given order.
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

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (p, &aip) in a.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                for (oj, &b) in o.iter_mut().zip(other.row(p)) {
                    *oj += aip * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_to_diagonal(&mut self, value: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self.data[i * self.cols + i] += value;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn to_faer(&self) -> Mat<f64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Unrolled dot product; four accumulators let the compiler vectorize.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    /// Row-major, only the lower triangle is meaningful.
    l: Vec<f64>,
    large: Option<faer::linalg::solvers::Llt<f64>>,
}

impl Cholesky {
    /// Factorizes a symmetric positive-definite matrix (no jitter).
    pub fn factor(a: &Matrix) -> Result<Self> {
        check_dim(a.rows, a.cols)?;
        let n = a.rows;
        if n >= LARGE_FACTOR_SIZE {
            return Self::factor_large(a);
        }
        let mut l = a.data.clone();
        for i in 0..n {
            let ri = i * n;
            for j in 0..=i {
                let rj = j * n;
                let s = l[ri + j] - dot(&l[ri..ri + j], &l[rj..rj + j]);
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(GpError::NotPositiveDefinite { size: n, jitter: 0.0 });
                    }
                    l[ri + i] = s.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
            for v in &mut l[ri + i + 1..ri + n] {
                *v = 0.0;
            }
        }
        Ok(Self { n, l, large: None })
    }

    fn factor_large(a: &Matrix) -> Result<Self> {
        let n = a.rows;
        let llt = a
            .to_faer()
            .llt(Side::Lower)
            .map_err(|_| GpError::NotPositiveDefinite { size: n, jitter: 0.0 })?;
        let lf = llt.L();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                l[i * n + j] = lf[(i, j)];
            }
        }
        if l.iter().any(|v| !v.is_finite()) {
            return Err(GpError::NotPositiveDefinite { size: n, jitter: 0.0 });
        }
        Ok(Self {
            n,
            l,
            large: Some(llt),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn lower(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.l[i * self.n + j]
        }
    }

    /// Solves `L z = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s = b[i] - dot(row, &b[..i]);
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn solve_upper_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let xi = b[i] / self.l[i * n + i];
            b[i] = xi;
            // column i of Lᵀ above the diagonal is row i of L
            let row = &self.l[i * n..i * n + i];
            for (bj, &lij) in b[..i].iter_mut().zip(row) {
                *bj -= lij * xi;
            }
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        check_dim(self.n, b.rows)?;
        let mut out = Matrix::zeros(b.rows, b.cols);
        let mut col = vec![0.0; self.n];
        for j in 0..b.cols {
            for i in 0..self.n {
                col[i] = b[(i, j)];
            }
            self.solve_lower_in_place(&mut col);
            self.solve_upper_in_place(&mut col);
            for i in 0..self.n {
                out[(i, j)] = col[i];
            }
        }
        Ok(out)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>()
    }

    /// Full inverse `A⁻¹`.
    pub fn inverse(&self) -> Matrix {
        let n = self.n;
        if let Some(llt) = &self.large {
            let inv = llt.inverse();
            return Matrix::from_fn(n, n, |i, j| inv[(i, j)]);
        }
        // rows of Linv are computed as columns of Linvᵀ: solve L z = e_j
        let mut linv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.solve_lower_in_place(&mut e);
            for i in j..n {
                linv[(i, j)] = e[i];
            }
        }
        // A⁻¹ = Linvᵀ Linv, (A⁻¹)_ab = Σ_{i ≥ max(a,b)} Linv_ia Linv_ib
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            let r = linv.row(i);
            for a in 0..=i {
                let ra = r[a];
                if ra == 0.0 {
                    continue;
                }
                for b in 0..=a {
                    out.data[a * n + b] += ra * r[b];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                out.data[b * n + a] = out.data[a * n + b];
            }
        }
        out
    }
}

/// Factorizes `a + jitter·I`, starting at `base_jitter` and escalating once by
/// [`JITTER_ESCALATION`]. Returns the factor and the jitter actually used.
pub fn factor_with_jitter(a: &Matrix, base_jitter: f64) -> Result<(Cholesky, f64)> {
    let mut jitter = base_jitter;
    for attempt in 0..2 {
        let mut m = a.clone();
        m.add_to_diagonal(jitter);
        match Cholesky::factor(&m) {
            Ok(c) => return Ok((c, jitter)),
            Err(_) if attempt == 0 => jitter *= JITTER_ESCALATION,
            Err(_) => {}
        }
    }
    Err(GpError::NotPositiveDefinite {
        size: a.rows,
        jitter,
    })
}

/// Solves `A X = B` for symmetric positive-definite `A`.
///
/// The plain factorization is tried first; if it fails a single retry adds
/// `1e-5 · mean(diag A)` to the diagonal.
pub fn chol_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    check_dim(a.rows, a.cols)?;
    check_dim(a.rows, b.rows)?;
    let chol = match Cholesky::factor(a) {
        Ok(c) => c,
        Err(_) => {
            let n = a.rows.max(1) as f64;
            let scale = (0..a.rows).map(|i| a[(i, i)].abs()).sum::<f64>() / n;
            let jitter = BASE_JITTER * JITTER_ESCALATION * scale;
            let mut m = a.clone();
            m.add_to_diagonal(jitter);
            Cholesky::factor(&m).map_err(|_| GpError::NotPositiveDefinite {
                size: a.rows,
                jitter,
            })?
        }
    };
    chol.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve_returns_rhs() {
        let b = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.5, 0.25], vec![0.0, 7.0]]).unwrap();
        let x = chol_solve(&Matrix::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn scalar_solve() {
        let a = Matrix::from_rows(&[vec![4.0]]).unwrap();
        let x = chol_solve(&a, &Matrix::column(&[8.0])).unwrap();
        assert_eq!(x[(0, 0)], 2.0);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let err = chol_solve(&a, &Matrix::column(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, GpError::NotPositiveDefinite { .. }));
        assert!(factor_with_jitter(&a, 1e-6).is_err());
    }

    #[test]
    fn jitter_escalates_once_for_singular_matrix() {
        // rank-one PSD matrix: fails without jitter, succeeds with it
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(Cholesky::factor(&a).is_err());
        let (_, j) = factor_with_jitter(&a, 1e-6).unwrap();
        assert_eq!(j, 1e-6);
    }

    #[test]
    fn small_and_large_paths_agree() {
        let n = LARGE_FACTOR_SIZE + 3;
        let a = Matrix::from_fn(n, n, |i, j| {
            let d = i as f64 - j as f64;
            (-0.01 * d * d).exp() + if i == j { 0.5 } else { 0.0 }
        });
        let large = Cholesky::factor(&a).unwrap();
        assert!(large.large.is_some());
        // force the hand-written path on the same matrix
        let mut l = a.data.clone();
        for i in 0..n {
            for j in 0..=i {
                let s = l[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
                l[i * n + j] = if i == j { s.sqrt() } else { s / l[j * n + j] };
            }
        }
        for i in 0..n {
            for j in 0..=i {
                assert!((large.lower(i, j) - l[i * n + j]).abs() < 1e-10);
            }
        }
        let inv = large.inverse();
        let small = Cholesky {
            n,
            l: l.clone(),
            large: None,
        };
        let inv2 = small.inverse();
        for (x, y) in inv.as_slice().iter().zip(inv2.as_slice()) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}
