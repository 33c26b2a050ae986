//! Small dense real matrices and the handful of factorizations the rest of
//! the crate needs: LU solves, cyclic Jacobi for symmetric eigenproblems,
//! Lyapunov solves by Kronecker vectorization, and PSD square roots.
//!
//! Dimensions here are small (a few dozen at most), so every routine favors
//! simplicity and accuracy over asymptotic cost.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Eigenvalues with real part in `(-HURWITZ_TOL, 0]` count as unstable.
pub const HURWITZ_TOL: f64 = 1e-10;

/// Relative clipping threshold for slightly negative eigenvalues in
/// [`sqrt_psd`].
pub const PSD_CLIP_TOL: f64 = 1e-12;

/// Dense row-major matrix with finite entries.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "matrix must be at least 1x1, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(idx) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite entry at ({}, {})",
                idx / cols,
                idx % cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
            return Err(Error::Dimension(format!(
                "row {bad} has {} entries, expected {ncols}",
                rows[bad].len()
            )));
        }
        Self::new(nrows, ncols, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be at least 1x1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// 1x1 matrix.
    pub fn scalar(value: f64) -> Self {
        Self::from_diag(&[value])
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Self::zeros(u.len(), v.len());
        for (i, &ui) in u.iter().enumerate() {
            for (j, &vj) in v.iter().enumerate() {
                m[(i, j)] = ui * vj;
            }
        }
        m
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

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
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

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * factor).collect(),
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matrix-vector dimension mismatch");
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self += factor * other`, in place.
    pub fn add_scaled(&mut self, factor: f64, other: &Matrix) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "matrix dimension mismatch"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        let t = self.transpose();
        (self + &t).scale(0.5)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = 1.0 + self.max_abs();
        (0..self.rows)
            .all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * scale))
    }

    fn check_same_shape(&self, other: &Matrix, what: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    fn check_square(&self, what: &str) -> Result<()> {
        if !self.is_square() {
            return Err(Error::Dimension(format!(
                "{what} must be square, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.chunks(self.cols)).finish()
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;

    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matrix product dimension mismatch");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = rhs.row(k);
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }
}

impl Add for &Matrix {
    type Output = Matrix;

    fn add(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_scaled(1.0, rhs);
        out
    }
}

impl Sub for &Matrix {
    type Output = Matrix;

    fn sub(self, rhs: &Matrix) -> Matrix {
        let mut out = self.clone();
        out.add_scaled(-1.0, rhs);
        out
    }
}

impl Neg for &Matrix {
    type Output = Matrix;

    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

pub fn hs_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Largest singular value, from the symmetric eigenproblem of `MᵀM`.
pub fn operator_norm(m: &Matrix) -> f64 {
    let gram = &m.transpose() * m;
    let eig = symmetric_eigen(&gram).expect("Gram matrix is square and symmetric");
    eig.values
        .iter()
        .fold(0.0_f64, |acc, &v| acc.max(v))
        .max(0.0)
        .sqrt()
}

/// Euclidean norm of a vector.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Eigendecomposition `M = Q diag(values) Qᵀ` of a symmetric matrix.
/// Eigenvalues are sorted ascending; `vectors` holds eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymmetricEigen {
    /// Rebuilds `Q diag(f(λ)) Qᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let mut out = Matrix::zeros(n, n);
        for (k, &lambda) in self.values.iter().enumerate() {
            let w = f(lambda);
            if w == 0.0 {
                continue;
            }
            for i in 0..n {
                let qik = self.vectors[(i, k)] * w;
                for j in 0..n {
                    out[(i, j)] += qik * self.vectors[(j, k)];
                }
            }
        }
        out
    }
}

/// Cyclic Jacobi eigenvalue iteration.
pub fn symmetric_eigen(m: &Matrix) -> Result<SymmetricEigen> {
    m.check_square("symmetric eigenproblem input")?;
    if !m.is_symmetric(1e-10) {
        return Err(Error::NotSymmetric(
            "eigendecomposition input differs from its transpose".into(),
        ));
    }
    let n = m.rows;
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = hs_norm(&a);
    if scale == 0.0 {
        return Ok(SymmetricEigen {
            values: vec![0.0; n],
            vectors: v,
        });
    }

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, dst)] = v[(i, src)];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(symmetric_eigen(m)?.values[0])
}

/// Eigenvalues of a general real square matrix as `(re, im)` pairs.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<(f64, f64)>> {
    m.check_square("eigenvalue input")?;
    let dm = nalgebra::DMatrix::from_row_slice(m.rows, m.cols, &m.data);
    Ok(dm
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect())
}

/// True iff every eigenvalue has real part below `-HURWITZ_TOL`.
pub fn is_hurwitz(a: &Matrix) -> Result<bool> {
    Ok(eigenvalues(a)?.iter().all(|&(re, _)| re < -HURWITZ_TOL))
}

/// Solves `A X = B` by LU with partial pivoting. `B` may have several columns.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.check_square("linear system matrix")?;
    if b.rows != a.rows {
        return Err(Error::Dimension(format!(
            "right-hand side has {} rows, system has {}",
            b.rows, a.rows
        )));
    }
    let n = a.rows;
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().total_cmp(&lu[(j, col)].abs()))
            .expect("non-empty pivot range");
        if lu[(pivot, col)].abs() <= 1e-14 * scale {
            return Err(Error::Singular(format!(
                "pivot {col} vanishes (|p| = {:e})",
                lu[(pivot, col)].abs()
            )));
        }
        if pivot != col {
            swap_rows(&mut lu, pivot, col);
            swap_rows(&mut x, pivot, col);
        }
        let p = lu[(col, col)];
        for i in (col + 1)..n {
            let f = lu[(i, col)] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[(i, j)] -= f * lu[(col, j)];
            }
            for j in 0..x.cols {
                x[(i, j)] -= f * x[(col, j)];
            }
        }
    }
    for col in (0..n).rev() {
        let p = lu[(col, col)];
        for j in 0..x.cols {
            let mut acc = x[(col, j)];
            for k in (col + 1)..n {
                acc -= lu[(col, k)] * x[(k, j)];
            }
            x[(col, j)] = acc / p;
        }
    }
    Ok(x)
}

/// Solves `A x = b` for a single right-hand side.
pub fn solve_vec(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let rhs = Matrix::new(b.len(), 1, b.to_vec())?;
    Ok(solve(a, &rhs)?.data)
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    a.check_square("inverse input")?;
    solve(a, &Matrix::identity(a.rows))
}

fn swap_rows(m: &mut Matrix, a: usize, b: usize) {
    if a == b {
        return;
    }
    for j in 0..m.cols {
        m.data.swap(a * m.cols + j, b * m.cols + j);
    }
}

/// Residual `Σ Aᵀ + A Σ + Q`.
pub fn lyapunov_residual(a: &Matrix, q: &Matrix, sigma: &Matrix) -> Matrix {
    let mut r = sigma * &a.transpose();
    r.add_scaled(1.0, &(a * sigma));
    r.add_scaled(1.0, q);
    r
}

/// Solves `Σ Aᵀ + A Σ + Q = 0` for Hurwitz `A` by vectorizing into
/// `(I⊗A + A⊗I) vec(Σ) = -vec(Q)`.
pub fn solve_lyapunov(a: &Matrix, q: &Matrix) -> Result<Matrix> {
    a.check_square("Lyapunov coefficient matrix")?;
    a.check_same_shape(q, "Lyapunov right-hand side")?;
    if !q.is_symmetric(1e-12) {
        return Err(Error::NotSymmetric("Lyapunov right-hand side".into()));
    }
    if !is_hurwitz(a)? {
        return Err(Error::Stability(
            "Lyapunov coefficient matrix is not Hurwitz".into(),
        ));
    }
    let d = a.rows;
    let mut kron = Matrix::zeros(d * d, d * d);
    for i in 0..d {
        for j in 0..d {
            let row = i * d + j;
            for k in 0..d {
                // (A Σ)_ij = Σ_k A_ik Σ_kj, (Σ Aᵀ)_ij = Σ_k Σ_ik A_jk
                kron[(row, k * d + j)] += a[(i, k)];
                kron[(row, i * d + k)] += a[(j, k)];
            }
        }
    }
    let rhs = Matrix::new(d * d, 1, q.data.iter().map(|x| -x).collect())?;
    let mut vec_sigma = solve(&kron, &rhs)?;

    // one round of iterative refinement
    let residual = &(&kron * &vec_sigma) - &rhs;
    let correction = solve(&kron, &residual)?;
    vec_sigma.add_scaled(-1.0, &correction);

    Ok(Matrix::new(d, d, vec_sigma.data)?.symmetrized())
}

/// Symmetric PSD square root. Eigenvalues in `[-1e-12·‖M‖_op, 0)` are clipped
/// to zero; anything more negative is rejected.
pub fn sqrt_psd(m: &Matrix) -> Result<Matrix> {
    let eig = psd_eigen(m)?;
    Ok(eig.map(|l| l.max(0.0).sqrt()).symmetrized())
}

/// Inverse square root of a symmetric positive definite matrix.
pub fn inv_sqrt_pd(m: &Matrix) -> Result<Matrix> {
    let eig = psd_eigen(m)?;
    let top = eig.values.last().copied().unwrap_or(0.0);
    if eig.values[0] <= 1e-14 * top.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd(format!(
            "inverse square root needs a positive definite matrix, min eigenvalue {:e}",
            eig.values[0]
        )));
    }
    Ok(eig.map(|l| 1.0 / l.sqrt()).symmetrized())
}

fn psd_eigen(m: &Matrix) -> Result<SymmetricEigen> {
    let eig = symmetric_eigen(m)?;
    let opnorm = eig.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let floor = -PSD_CLIP_TOL * opnorm;
    if let Some(&bad) = eig.values.iter().find(|&&l| l < floor) {
        return Err(Error::NotPsd(format!("eigenvalue {bad:e} below {floor:e}")));
    }
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hurwitz_examples() {
        assert!(is_hurwitz(&Matrix::identity(2).scale(-1.0)).unwrap());
        assert!(!is_hurwitz(&Matrix::identity(2)).unwrap());
        assert!(!is_hurwitz(&m(&[&[0.0, 1.0], &[-1.0, 0.0]])).unwrap());
        // marginal: real part inside the tolerance band
        assert!(!is_hurwitz(&Matrix::scalar(-1e-11)).unwrap());
        assert!(matches!(
            is_hurwitz(&Matrix::zeros(2, 3)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn lyapunov_examples() {
        let sigma = solve_lyapunov(&Matrix::identity(2).scale(-1.0), &Matrix::identity(2).scale(2.0))
            .unwrap();
        assert!(hs_norm(&(&sigma - &Matrix::identity(2))) < 1e-12);

        let a = Matrix::from_diag(&[-1.0, -2.0]);
        let sigma = solve_lyapunov(&a, &Matrix::identity(2)).unwrap();
        assert!(hs_norm(&(&sigma - &Matrix::from_diag(&[0.5, 0.25]))) < 1e-12);
    }

    #[test]
    fn lyapunov_errors() {
        let q = Matrix::identity(2);
        assert!(matches!(
            solve_lyapunov(&Matrix::identity(2), &q),
            Err(Error::Stability(_))
        ));
        assert!(matches!(
            solve_lyapunov(&Matrix::identity(3).scale(-1.0), &q),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sqrt_examples() {
        let s = sqrt_psd(&Matrix::identity(3)).unwrap();
        assert!(hs_norm(&(&s - &Matrix::identity(3))) < 1e-14);
        let s = sqrt_psd(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert!(hs_norm(&(&s - &Matrix::from_diag(&[2.0, 3.0]))) < 1e-14);
    }

    #[test]
    fn sqrt_of_two_by_two_matches_eigen_oracle() {
        // eigenvalues 1 and 3 with eigenvectors (1,-1)/√2 and (1,1)/√2
        let mm = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let s = sqrt_psd(&mm).unwrap();
        let (a, b) = ((1.0 + 3f64.sqrt()) / 2.0, (3f64.sqrt() - 1.0) / 2.0);
        assert!(hs_norm(&(&s - &m(&[&[a, b], &[b, a]]))) < 1e-12);
        assert!(hs_norm(&(&(&s * &s) - &mm)) < 1e-10);
    }

    #[test]
    fn sqrt_clips_tiny_negative_and_rejects_large_negative() {
        let s = sqrt_psd(&Matrix::from_diag(&[1.0, -1e-14])).unwrap();
        assert_eq!(s[(1, 1)], 0.0);
        assert!(matches!(
            sqrt_psd(&Matrix::from_diag(&[1.0, -1e-6])),
            Err(Error::NotPsd(_))
        ));
    }

    #[test]
    fn norm_examples() {
        assert!(close(operator_norm(&Matrix::identity(4)), 1.0, 1e-12));
        assert!(close(operator_norm(&Matrix::from_diag(&[3.0, 1.0])), 3.0, 1e-12));
        assert!(close(operator_norm(&m(&[&[0.0, 2.0], &[0.0, 0.0]])), 2.0, 1e-12));
        assert!(close(hs_norm(&Matrix::identity(2)), 2f64.sqrt(), 1e-15));
        assert_eq!(hs_norm(&Matrix::zeros(2, 2)), 0.0);
        assert!(close(hs_norm(&m(&[&[3.0, 4.0], &[0.0, 0.0]])), 5.0, 1e-15));
    }

    #[test]
    fn solve_detects_singular() {
        let a = m(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            solve_vec(&a, &[1.0, 1.0]),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn construction_rejects_ragged_and_nonfinite() {
        assert!(Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0]]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(Matrix::new(0, 1, vec![]).is_err());
    }
}
