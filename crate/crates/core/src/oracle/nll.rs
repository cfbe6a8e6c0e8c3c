//! Multinomial-logit classifier with analytic gradients, Gauss–Newton and residual curvature.
//!
//! Logits are `z = W x`. With `p = softmax(z)`, `δ = p − e_y` and `J = ∂z/∂θ`:
//! the gradient is `Jᵀδ`, the Gauss–Newton term is `Jᵀ(diag p − ppᵀ)J`, and the residual is
//! `Σ_c δ_c ∇²z_c`, which vanishes when `z` is linear in `θ`.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::linalg::Matrix;
use crate::oracle::adam::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Parameterization {
    /// `θ = W` row-major, `C × d_in`.
    Linear,
    /// `W = W₀ + BA` with `θ = [A row-major (rank × d_in); B row-major (C × rank)]`.
    LowRank { base: Matrix, rank: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NllToyModel {
    n_features: usize,
    n_classes: usize,
    param: Parameterization,
}

/// Mean curvature of the loss over a dataset, split as `H = GN + R`.
#[derive(Clone, Debug, PartialEq)]
pub struct Curvature {
    pub hessian: Matrix,
    pub gauss_newton: Matrix,
    pub residual: Matrix,
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl NllToyModel {
    pub fn linear(n_features: usize, n_classes: usize) -> Result<Self> {
        if n_features == 0 || n_classes < 2 {
            return Err(GistError::arg("need at least one feature and two classes"));
        }
        Ok(Self {
            n_features,
            n_classes,
            param: Parameterization::Linear,
        })
    }

    pub fn low_rank(base: Matrix, rank: usize) -> Result<Self> {
        if base.cols() == 0 || base.rows() < 2 || rank == 0 {
            return Err(GistError::arg(
                "low-rank model needs a C × d_in base with C ≥ 2 and rank ≥ 1",
            ));
        }
        Ok(Self {
            n_features: base.cols(),
            n_classes: base.rows(),
            param: Parameterization::LowRank { base, rank },
        })
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn parameterization(&self) -> &Parameterization {
        &self.param
    }

    pub fn parameter_dim(&self) -> usize {
        match &self.param {
            Parameterization::Linear => self.n_classes * self.n_features,
            Parameterization::LowRank { rank, .. } => rank * (self.n_features + self.n_classes),
        }
    }

    fn check_theta(&self, theta: &[f64]) {
        assert_eq!(theta.len(), self.parameter_dim(), "parameter vector length");
    }

    /// Effective `C × d_in` weight.
    pub fn weights(&self, theta: &[f64]) -> Matrix {
        self.check_theta(theta);
        match &self.param {
            Parameterization::Linear => {
                Matrix::from_vec(self.n_classes, self.n_features, theta.to_vec())
            }
            Parameterization::LowRank { base, rank } => {
                let (a, b) = self.factors(theta, *rank);
                base.add(&b.matmul(&a))
            }
        }
    }

    fn factors(&self, theta: &[f64], rank: usize) -> (Matrix, Matrix) {
        let na = rank * self.n_features;
        let a = Matrix::from_vec(rank, self.n_features, theta[..na].to_vec());
        let b = Matrix::from_vec(self.n_classes, rank, theta[na..].to_vec());
        (a, b)
    }

    pub fn logits(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        self.weights(theta).matvec(x)
    }

    /// `∂z/∂θ`, `C × P`.
    pub fn jacobian(&self, theta: &[f64], x: &[f64]) -> Matrix {
        self.check_theta(theta);
        let (c_n, d) = (self.n_classes, self.n_features);
        let mut j = Matrix::zeros(c_n, self.parameter_dim());
        match &self.param {
            Parameterization::Linear => {
                for c in 0..c_n {
                    j.row_mut(c)[c * d..(c + 1) * d].copy_from_slice(x);
                }
            }
            Parameterization::LowRank { rank, .. } => {
                let (a, b) = self.factors(theta, *rank);
                let ax = a.matvec(x);
                let off = rank * d;
                for c in 0..c_n {
                    let row = j.row_mut(c);
                    for k in 0..*rank {
                        for (jj, &xj) in x.iter().enumerate() {
                            row[k * d + jj] = b[(c, k)] * xj;
                        }
                        row[off + c * rank + k] = ax[k];
                    }
                }
            }
        }
        j
    }

    fn check_example(&self, ex: &LabeledExample) -> Result<()> {
        if ex.features.len() != self.n_features || ex.label >= self.n_classes {
            return Err(GistError::arg(format!(
                "example with {} features and label {} does not fit the model",
                ex.features.len(),
                ex.label
            )));
        }
        Ok(())
    }

    pub fn example_loss(&self, theta: &[f64], ex: &LabeledExample) -> f64 {
        let z = self.logits(theta, &ex.features);
        (log_sum_exp(&z) - z[ex.label]).max(0.0)
    }

    fn residual_vector(&self, theta: &[f64], ex: &LabeledExample) -> Vec<f64> {
        let mut delta = softmax(&self.logits(theta, &ex.features));
        delta[ex.label] -= 1.0;
        delta
    }

    pub fn example_gradient(&self, theta: &[f64], ex: &LabeledExample) -> Vec<f64> {
        let delta = self.residual_vector(theta, ex);
        self.jacobian(theta, &ex.features)
            .transpose()
            .matvec(&delta)
    }

    pub fn loss(&self, theta: &[f64], data: &[LabeledExample]) -> Result<f64> {
        if data.is_empty() {
            return Err(GistError::arg("empty dataset"));
        }
        let mut total = 0.0;
        for ex in data {
            self.check_example(ex)?;
            total += self.example_loss(theta, ex);
        }
        Ok(total / data.len() as f64)
    }

    pub fn gradient(&self, theta: &[f64], data: &[LabeledExample]) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(GistError::arg("empty dataset"));
        }
        let mut g = vec![0.0; self.parameter_dim()];
        for ex in data {
            self.check_example(ex)?;
            for (gi, v) in g.iter_mut().zip(self.example_gradient(theta, ex)) {
                *gi += v;
            }
        }
        let n = data.len() as f64;
        Ok(g.into_iter().map(|v| v / n).collect())
    }

    /// One row per example.
    pub fn per_example_gradients(&self, theta: &[f64], data: &[LabeledExample]) -> Result<Matrix> {
        let mut rows = Vec::with_capacity(data.len());
        for ex in data {
            self.check_example(ex)?;
            rows.push(self.example_gradient(theta, ex));
        }
        if rows.is_empty() {
            return Err(GistError::arg("empty dataset"));
        }
        Ok(Matrix::from_rows(&rows))
    }

    /// `(1/n) Gᵀ G` over per-example gradients.
    pub fn fisher_proxy(&self, theta: &[f64], data: &[LabeledExample]) -> Result<Matrix> {
        let g = self.per_example_gradients(theta, data)?;
        Ok(g.transpose()
            .matmul(&g)
            .scale(1.0 / data.len() as f64)
            .symmetrized())
    }

    pub fn curvature(&self, theta: &[f64], data: &[LabeledExample]) -> Result<Curvature> {
        if data.is_empty() {
            return Err(GistError::arg("empty dataset"));
        }
        let p_dim = self.parameter_dim();
        let mut gn = Matrix::zeros(p_dim, p_dim);
        let mut res = Matrix::zeros(p_dim, p_dim);
        for ex in data {
            self.check_example(ex)?;
            let p = softmax(&self.logits(theta, &ex.features));
            let j = self.jacobian(theta, &ex.features);
            let s = Matrix::from_fn(p.len(), p.len(), |a, b| {
                if a == b {
                    p[a] - p[a] * p[b]
                } else {
                    -p[a] * p[b]
                }
            });
            gn = gn.add(&j.transpose().matmul(&s.matmul(&j)));
            if let Parameterization::LowRank { rank, .. } = &self.param {
                let mut delta = p.clone();
                delta[ex.label] -= 1.0;
                let d = self.n_features;
                let off = rank * d;
                // ∂²z_c / ∂A_kj ∂B_ck = x_j is the only nonzero second derivative.
                for (c, dc) in delta.iter().enumerate() {
                    for k in 0..*rank {
                        let bi = off + c * rank + k;
                        for (jj, &xj) in ex.features.iter().enumerate() {
                            let ai = k * d + jj;
                            res[(ai, bi)] += dc * xj;
                            res[(bi, ai)] += dc * xj;
                        }
                    }
                }
            }
        }
        let inv = 1.0 / data.len() as f64;
        let gauss_newton = gn.scale(inv).symmetrized();
        let residual = res.scale(inv).symmetrized();
        Ok(Curvature {
            hessian: gauss_newton.add(&residual),
            gauss_newton,
            residual,
        })
    }
}

/// Examples from a softmax teacher: `x ~ N(mean, I)`, `y ~ softmax(teacher · x)`.
pub fn sample_examples<R: Rng>(
    rng: &mut R,
    teacher: &Matrix,
    mean: &[f64],
    n: usize,
) -> Vec<LabeledExample> {
    (0..n)
        .map(|_| {
            let features: Vec<f64> = mean
                .iter()
                .map(|m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let p = softmax(&teacher.matvec(&features));
            let label = sample_categorical(rng, &p);
            LabeledExample { features, label }
        })
        .collect()
}

pub fn sample_categorical<R: Rng>(rng: &mut R, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            adam: AdamConfig::constant(0.05),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub theta: Vec<f64>,
    /// Mini-batch loss before each update.
    pub losses: Vec<f64>,
}

/// Adam over shuffled mini-batches.
pub fn train<R: Rng>(
    model: &NllToyModel,
    data: &[LabeledExample],
    theta0: &[f64],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<TrainResult> {
    let mut theta = theta0.to_vec();
    let mut losses = Vec::new();
    if config.epochs == 0 || data.is_empty() {
        return Ok(TrainResult { theta, losses });
    }
    let batch = if config.batch_size == 0 {
        data.len()
    } else {
        config.batch_size.min(data.len())
    };
    let mut state = AdamState::new(config.adam, theta.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        shuffle(rng, &mut order);
        for idx in order.chunks(batch) {
            let mb: Vec<LabeledExample> = idx.iter().map(|&i| data[i].clone()).collect();
            let loss = model.loss(&theta, &mb)?;
            let g = model.gradient(&theta, &mb)?;
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(GistError::Divergence {
                    step: losses.len(),
                    reason: format!("loss {loss}"),
                });
            }
            losses.push(loss);
            state.step(&mut theta, &g);
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(GistError::Divergence {
            step: losses.len(),
            reason: "non-finite parameters".into(),
        });
    }
    Ok(TrainResult { theta, losses })
}

fn shuffle<R: Rng>(rng: &mut R, v: &mut [usize]) {
    use rand::seq::SliceRandom;
    v.shuffle(rng);
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WarmupConfig {
    pub fraction: f64,
    pub train: TrainConfig,
}

impl Default for WarmupConfig {
    fn default() -> Self {
        Self {
            fraction: 0.05,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmupResult {
    pub theta: Vec<f64>,
    pub losses: Vec<f64>,
    /// Indices of the warmup subset, ascending.
    pub subset: Vec<usize>,
}

/// Trains on a seeded random `fraction` of `data` (at least one example).
pub fn warmup_train<R: Rng>(
    model: &NllToyModel,
    data: &[LabeledExample],
    theta0: &[f64],
    config: &WarmupConfig,
    rng: &mut R,
) -> Result<WarmupResult> {
    if !(config.fraction > 0.0 && config.fraction <= 1.0) {
        return Err(GistError::arg(format!(
            "warmup fraction {} outside (0, 1]",
            config.fraction
        )));
    }
    if data.is_empty() {
        return Err(GistError::arg("empty dataset"));
    }
    let m = ((config.fraction * data.len() as f64).round() as usize).clamp(1, data.len());
    let mut subset = sample(rng, data.len(), m).into_vec();
    subset.sort_unstable();
    let chosen: Vec<LabeledExample> = subset.iter().map(|&i| data[i].clone()).collect();
    let out = train(model, &chosen, theta0, &config.train, rng)?;
    Ok(WarmupResult {
        theta: out.theta,
        losses: out.losses,
        subset,
    })
}

/// Shared test fixture: a random instance with a small teacher.
pub struct NllInstance {
    pub model: NllToyModel,
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub theta0: Vec<f64>,
}

impl NllInstance {
    pub fn linear<R: Rng>(
        rng: &mut R,
        n_features: usize,
        n_classes: usize,
        n_train: usize,
        n_val: usize,
    ) -> Self {
        let teacher = random_matrix(rng, n_classes, n_features, 1.0);
        let mean = vec![0.0; n_features];
        let train = sample_examples(rng, &teacher, &mean, n_train);
        let validation = sample_examples(rng, &teacher, &mean, n_val);
        let model = NllToyModel::linear(n_features, n_classes).expect("valid shape");
        let theta0 = random_matrix(rng, 1, model.parameter_dim(), 0.1)
            .as_slice()
            .to_vec();
        Self {
            model,
            train,
            validation,
            theta0,
        }
    }

    /// `teacher_scale` sets label sharpness: large values make labels nearly deterministic.
    pub fn low_rank<R: Rng>(
        rng: &mut R,
        n_features: usize,
        n_classes: usize,
        rank: usize,
        n_train: usize,
        n_val: usize,
        teacher_scale: f64,
    ) -> Self {
        let teacher = random_matrix(rng, n_classes, n_features, teacher_scale);
        let mean = vec![0.0; n_features];
        let train = sample_examples(rng, &teacher, &mean, n_train);
        let validation = sample_examples(rng, &teacher, &mean, n_val);
        let base = random_matrix(rng, n_classes, n_features, 0.1);
        let model = NllToyModel::low_rank(base, rank).expect("valid shape");
        let theta0 = random_matrix(rng, 1, model.parameter_dim(), 0.3)
            .as_slice()
            .to_vec();
        Self {
            model,
            train,
            validation,
            theta0,
        }
    }
}
