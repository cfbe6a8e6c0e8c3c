//! Quadratic loss in `W` seen through the factorization `W = W₀ + BA`.
//!
//! `vec` is column-major: entry `(i, j)` of a `d_out × d_in` matrix sits at `j·d_out + i`,
//! which makes `vec(u vᵀ) = v ⊗ u`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GistError, Result};
use crate::linalg::{self, dot, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModel {
    w0: Matrix,
    b: Matrix,
    a: Matrix,
    h_w: Matrix,
    linear: Vec<f64>,
}

impl LoraModel {
    pub fn new(w0: Matrix, b: Matrix, a: Matrix, h_w: Matrix, linear: Vec<f64>) -> Result<Self> {
        let (d_out, d_in) = (w0.rows(), w0.cols());
        if b.rows() != d_out || a.cols() != d_in || b.cols() != a.rows() || a.rows() == 0 {
            return Err(GistError::arg(format!(
                "shapes W0 {}x{}, B {}x{}, A {}x{} do not compose",
                d_out,
                d_in,
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        let p = d_out * d_in;
        if h_w.rows() != p || h_w.cols() != p || linear.len() != p {
            return Err(GistError::arg(format!(
                "H_W and the linear term must act on vec(W) of length {p}"
            )));
        }
        let scale = h_w.max_abs().max(1.0);
        if !h_w.is_symmetric(1e-10 * scale) {
            return Err(GistError::arg("H_W must be symmetric"));
        }
        let min_eig = linalg::symmetric_eigen(&h_w)
            .values
            .last()
            .copied()
            .unwrap_or(0.0);
        if min_eig < -1e-10 * scale {
            return Err(GistError::arg(format!(
                "H_W is not PSD (min eigenvalue {min_eig:e})"
            )));
        }
        Ok(Self {
            w0,
            b,
            a,
            h_w,
            linear,
        })
    }

    /// Random model with entries drawn from the standard normal.
    ///
    /// `coupled` draws a dense PSD `H_W = MMᵀ/p + 0.1·I`; otherwise `H_W` is a positive diagonal.
    pub fn random<R: Rng>(
        rng: &mut R,
        d_out: usize,
        d_in: usize,
        rank: usize,
        coupled: bool,
    ) -> Self {
        let mut normal =
            |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w0 = normal(d_out, d_in).scale(0.5);
        let b = normal(d_out, rank);
        let a = normal(rank, d_in);
        let p = d_out * d_in;
        let h_w = if coupled {
            let m = normal(p, p);
            m.matmul(&m.transpose())
                .scale(1.0 / p as f64)
                .add(&Matrix::identity(p).scale(0.1))
                .symmetrized()
        } else {
            let d = normal(p, 1);
            Matrix::diag(&(0..p).map(|i| 0.1 + d[(i, 0)].abs()).collect::<Vec<_>>())
        };
        let linear = normal(p, 1).scale(0.5).as_slice().to_vec();
        Self {
            w0,
            b,
            a,
            h_w,
            linear,
        }
    }

    pub fn d_out(&self) -> usize {
        self.w0.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn h_w(&self) -> &Matrix {
        &self.h_w
    }

    pub fn linear(&self) -> &[f64] {
        &self.linear
    }

    pub fn vec_index(&self, i: usize, j: usize) -> usize {
        j * self.d_out() + i
    }

    fn vec_of(&self, w: &Matrix) -> Vec<f64> {
        let mut v = vec![0.0; w.rows() * w.cols()];
        for j in 0..w.cols() {
            for i in 0..w.rows() {
                v[self.vec_index(i, j)] = w[(i, j)];
            }
        }
        v
    }

    pub fn weight_with(&self, a: &Matrix) -> Matrix {
        self.w0.add(&self.b.matmul(a))
    }

    /// `½ vec(W)ᵀ H_W vec(W) + cᵀ vec(W)` at `W = W₀ + B·a`.
    pub fn loss_with(&self, a: &Matrix) -> f64 {
        let w = self.vec_of(&self.weight_with(a));
        0.5 * dot(&w, &self.h_w.matvec(&w)) + dot(&self.linear, &w)
    }

    pub fn loss(&self) -> f64 {
        self.loss_with(&self.a)
    }

    /// `e_j ⊗ B_{:k}`.
    pub fn a_direction(&self, k: usize, j: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d_out() * self.d_in()];
        for i in 0..self.d_out() {
            v[self.vec_index(i, j)] = self.b[(i, k)];
        }
        v
    }

    /// `A_{k:}ᵀ ⊗ e_i`.
    pub fn b_direction(&self, i: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.d_out() * self.d_in()];
        for j in 0..self.d_in() {
            v[self.vec_index(i, j)] = self.a[(k, j)];
        }
        v
    }

    /// `∂²L / ∂A_{k j₁} ∂A_{k j₂} = (e_{j₁} ⊗ B_{:k})ᵀ H_W (e_{j₂} ⊗ B_{:k})`.
    pub fn hessian_entry(&self, k: usize, j1: usize, j2: usize) -> Result<f64> {
        if k >= self.rank() || j1 >= self.d_in() || j2 >= self.d_in() {
            return Err(GistError::arg(format!(
                "entry (k={k}, j1={j1}, j2={j2}) outside rank {} × d_in {}",
                self.rank(),
                self.d_in()
            )));
        }
        let u = self.a_direction(k, j1);
        let v = self.a_direction(k, j2);
        Ok(dot(&u, &self.h_w.matvec(&v)))
    }

    /// `∂²L / ∂B_{i₁ k} ∂B_{i₂ k}`.
    pub fn b_hessian_entry(&self, k: usize, i1: usize, i2: usize) -> Result<f64> {
        if k >= self.rank() || i1 >= self.d_out() || i2 >= self.d_out() {
            return Err(GistError::arg(format!(
                "entry (k={k}, i1={i1}, i2={i2}) out of range"
            )));
        }
        let u = self.b_direction(i1, k);
        let v = self.b_direction(i2, k);
        Ok(dot(&u, &self.h_w.matvec(&v)))
    }

    /// Central finite difference of the composed loss in `A_{k j₁}, A_{k j₂}`, with
    /// `h = 1e-4 · (1 + |A_{kj}|)`.
    pub fn fd_hessian_entry(&self, k: usize, j1: usize, j2: usize) -> f64 {
        let h1 = 1e-4 * (1.0 + self.a[(k, j1)].abs());
        let h2 = 1e-4 * (1.0 + self.a[(k, j2)].abs());
        let at = |s1: f64, s2: f64| {
            let mut a = self.a.clone();
            a[(k, j1)] += s1;
            a[(k, j2)] += s2;
            self.loss_with(&a)
        };
        if j1 == j2 {
            (at(h1, 0.0) - 2.0 * at(0.0, 0.0) + at(-h1, 0.0)) / (h1 * h1)
        } else {
            (at(h1, h2) - at(h1, -h2) - at(-h1, h2) + at(-h1, -h2)) / (4.0 * h1 * h2)
        }
    }
}
