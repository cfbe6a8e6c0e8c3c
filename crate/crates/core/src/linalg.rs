//! Small dense linear algebra in f64.
//!
//! Only what the pipeline and the oracle models need: a row-major matrix, a cyclic Jacobi
//! symmetric eigensolver, a one-sided Jacobi SVD and spectral functions built on them.
//! Matrices here are at most a few thousand on a side.

use std::fmt;
use std::ops::{Index, IndexMut};

/// Relative cutoff below which an eigenvalue is treated as zero by the pseudoinverse.
pub const PINV_CUTOFF: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_TOL: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(
            self.cols,
            v.len(),
            "vector length differs from column count"
        );
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "shape mismatch"
        );
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.sub(other).max_abs()
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square());
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            0.5 * (self[(i, j)] + self[(j, i)])
        })
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// Columns `cols` of `self` as a new matrix.
    pub fn select_columns(&self, cols: std::ops::Range<usize>) -> Matrix {
        Matrix::from_fn(self.rows, cols.len(), |i, j| self[(i, cols.start + j)])
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

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: Matrix,
    pub sweeps: usize,
}

impl SymmetricEigen {
    /// The eigenvectors of the `r` largest eigenvalues as a `n × r` matrix.
    pub fn top(&self, r: usize) -> Matrix {
        self.vectors.select_columns(0..r)
    }
}

/// Cyclic Jacobi eigensolver.
///
/// Sweeps all off-diagonal pairs in row order until the off-diagonal Frobenius norm is at
/// most `1e-12 · ‖M‖_F`. The input is symmetrized first.
pub fn symmetric_eigen(m: &Matrix) -> SymmetricEigen {
    assert!(m.is_square(), "eigendecomposition needs a square matrix");
    let n = m.rows();
    let mut a = m.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let mut sweeps = 0;

    if scale > 0.0 {
        while sweeps < JACOBI_MAX_SWEEPS {
            if off_diagonal_norm(&a) <= JACOBI_TOL * scale {
                break;
            }
            sweeps += 1;
            for p in 0..n.saturating_sub(1) {
                for q in p + 1..n {
                    let apq = a[(p, q)];
                    if apq == 0.0 {
                        continue;
                    }
                    let (c, s) = jacobi_rotation(a[(p, p)], a[(q, q)], apq);
                    rotate_symmetric(&mut a, &mut v, p, q, c, s);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |i, j| v[(i, order[j])]);
    SymmetricEigen {
        values,
        vectors,
        sweeps,
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cosine and sine of the rotation that zeroes the `(p, q)` entry.
fn jacobi_rotation(app: f64, aqq: f64, apq: f64) -> (f64, f64) {
    let tau = (aqq - app) / (2.0 * apq);
    let t = if tau.abs() > 1e150 {
        0.5 / tau
    } else {
        tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt())
    };
    let t = if tau == 0.0 { 1.0 } else { t };
    let c = 1.0 / (1.0 + t * t).sqrt();
    (c, t * c)
}

fn rotate_symmetric(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
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
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Thin singular value decomposition `M = U diag(σ) Vᵀ` with σ descending.
#[derive(Clone, Debug)]
pub struct Svd {
    pub values: Vec<f64>,
    /// `m × k` left singular vectors, `k = min(m, n)`.
    pub u: Matrix,
    /// `n × k` right singular vectors.
    pub v: Matrix,
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Orthogonalizes the columns of `M` (or of `Mᵀ` when `M` is wide) by plane rotations.
/// Singular values come out with high relative accuracy, which is what the principal-angle
/// computation needs near 0 and 1.
pub fn svd(m: &Matrix) -> Svd {
    if m.rows() < m.cols() {
        let t = svd(&m.transpose());
        return Svd {
            values: t.values,
            u: t.v,
            v: t.u,
        };
    }
    let (rows, cols) = (m.rows(), m.cols());
    let mut u: Vec<Vec<f64>> = (0..cols).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..cols.saturating_sub(1) {
            for j in i + 1..cols {
                let alpha = dot(&u[i], &u[i]);
                let beta = dot(&u[j], &u[j]);
                let gamma = dot(&u[i], &u[j]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta == 0.0 {
                    1.0
                } else {
                    zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut u, i, j, c, s);
                rotate_columns(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = u.iter().map(|c| norm(c)).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u_mat = Matrix::from_fn(rows, cols, |i, k| {
        let j = order[k];
        if norms[j] > 0.0 {
            u[j][i] / norms[j]
        } else {
            0.0
        }
    });
    let v_mat = Matrix::from_fn(cols, cols, |i, k| v[order[k]][i]);
    Svd {
        values,
        u: u_mat,
        v: v_mat,
    }
}

fn rotate_columns(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Singular values only, descending.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    svd(m).values
}

/// `‖M‖₂` of a symmetric matrix, the largest absolute eigenvalue.
pub fn spectral_norm_symmetric(m: &Matrix) -> f64 {
    symmetric_eigen(m)
        .values
        .iter()
        .fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `‖M‖₂` of a general matrix.
pub fn spectral_norm(m: &Matrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Apply `f` to the eigenvalues of a symmetric matrix whose magnitude exceeds
/// `PINV_CUTOFF · max|λ|`, zeroing the rest, and reassemble `U f(Λ) Uᵀ`.
pub fn spectral_map(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let eig = symmetric_eigen(m);
    let n = m.rows();
    let lmax = eig.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let cutoff = PINV_CUTOFF * lmax;
    let mut out = Matrix::zeros(n, n);
    for (k, &lambda) in eig.values.iter().enumerate() {
        if lambda.abs() <= cutoff || lmax == 0.0 {
            continue;
        }
        let w = f(lambda);
        for i in 0..n {
            let ui = eig.vectors[(i, k)] * w;
            if ui == 0.0 {
                continue;
            }
            for j in 0..n {
                out[(i, j)] += ui * eig.vectors[(j, k)];
            }
        }
    }
    out.symmetrized()
}

/// Moore–Penrose pseudoinverse of a symmetric matrix.
pub fn pseudo_inverse_symmetric(m: &Matrix) -> Matrix {
    spectral_map(m, |l| 1.0 / l)
}

/// `(M†)^{1/2}` of a symmetric PSD matrix on the same support as the pseudoinverse.
/// Negative eigenvalues above the cutoff are clamped to zero.
pub fn pseudo_inverse_sqrt_psd(m: &Matrix) -> Matrix {
    spectral_map(m, |l| if l > 0.0 { 1.0 / l.sqrt() } else { 0.0 })
}

/// Largest `|AᵀA − I|` entry for a matrix meant to have orthonormal columns.
pub fn orthonormality_defect(a: &Matrix) -> f64 {
    let gram = a.transpose().matmul(a);
    gram.max_abs_diff(&Matrix::identity(a.cols()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn jacobi_diagonalizes_2x2() {
        let m = sym(&[vec![10.5, 9.5], vec![9.5, 10.5]]);
        let eig = symmetric_eigen(&m);
        assert!((eig.values[0] - 20.0).abs() < 1e-12);
        assert!((eig.values[1] - 1.0).abs() < 1e-12);
        let recon = eig
            .vectors
            .matmul(&Matrix::diag(&eig.values))
            .matmul(&eig.vectors.transpose());
        assert!(recon.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn jacobi_handles_zero_and_diagonal() {
        let z = symmetric_eigen(&Matrix::zeros(3, 3));
        assert_eq!(z.values, vec![0.0; 3]);
        let d = symmetric_eigen(&Matrix::diag(&[1.0, 3.0, 2.0]));
        assert_eq!(d.values, vec![3.0, 2.0, 1.0]);
        assert_eq!(d.sweeps, 0);
    }

    #[test]
    fn svd_reconstructs_and_orders() {
        let m = sym(&[vec![3.0, 1.0], vec![1.0, 3.0], vec![0.0, 2.0]]);
        let s = svd(&m);
        assert!(s.values[0] >= s.values[1]);
        let recon =
            s.u.matmul(&Matrix::diag(&s.values))
                .matmul(&s.v.transpose());
        assert!(recon.max_abs_diff(&m) < 1e-12);
        assert!(orthonormality_defect(&s.u) < 1e-12);
        assert!(orthonormality_defect(&s.v) < 1e-12);

        let wide = svd(&m.transpose());
        for (a, b) in wide.values.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_inverse_of_singular_diagonal() {
        let m = Matrix::diag(&[4.0, 0.0]);
        let p = pseudo_inverse_symmetric(&m);
        assert!(p.max_abs_diff(&Matrix::diag(&[0.25, 0.0])) < 1e-15);
        let r = pseudo_inverse_sqrt_psd(&m);
        assert!(r.max_abs_diff(&Matrix::diag(&[0.5, 0.0])) < 1e-15);
    }
}
