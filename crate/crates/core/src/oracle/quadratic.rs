//! Two-dimensional (or any-dimensional) quadratic bowls `L(θ) = ½ θᵀ H θ`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::linalg::{self, dot, Matrix};
use crate::oracle::adam::{AdamConfig, AdamState};

/// Shared start point of the 2-D toy runs.
pub const TOY_START: [f64; 2] = [-2.5, 0.0];

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticLandscape {
    hessian: Matrix,
}

impl QuadraticLandscape {
    pub fn new(hessian: Matrix) -> Result<Self> {
        if !hessian.is_square() || hessian.rows() == 0 {
            return Err(GistError::arg("Hessian must be square and nonempty"));
        }
        if !hessian.is_symmetric(1e-12) {
            return Err(GistError::arg("Hessian must be symmetric"));
        }
        Ok(Self { hessian })
    }

    /// `[[10.5, 9.5], [9.5, 10.5]]`: `diag(20, 1)` rotated by 45°.
    pub fn coupled() -> Self {
        Self {
            hessian: Matrix::from_rows(&[vec![10.5, 9.5], vec![9.5, 10.5]]),
        }
    }

    pub fn axis_aligned() -> Self {
        Self {
            hessian: Matrix::diag(&[20.0, 1.0]),
        }
    }

    /// `diag(λ₁, λ₂)` rotated by `angle`.
    pub fn rotated(eigenvalues: [f64; 2], angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let r = Matrix::from_rows(&[vec![c, -s], vec![s, c]]);
        let h = r
            .matmul(&Matrix::diag(&eigenvalues))
            .matmul(&r.transpose())
            .symmetrized();
        Self { hessian: h }
    }

    pub fn dim(&self) -> usize {
        self.hessian.rows()
    }

    pub fn hessian(&self) -> &Matrix {
        &self.hessian
    }

    /// Descending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        linalg::symmetric_eigen(&self.hessian).values
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        0.5 * dot(theta, &self.hessian.matvec(theta))
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        self.hessian.matvec(theta)
    }
}

/// `θ − lr · H† H θ`.
pub fn newton_step(landscape: &QuadraticLandscape, theta: &[f64], lr: f64) -> Vec<f64> {
    let pinv = linalg::pseudo_inverse_symmetric(landscape.hessian());
    let step = pinv.matvec(&landscape.gradient(theta));
    theta.iter().zip(&step).map(|(t, s)| t - lr * s).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Newton,
    Adam,
    Gd,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Newton => "newton",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Gd => "gd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Newton { lr: f64 },
    Adam(AdamConfig),
    Gd { lr: f64 },
}

impl Optimizer {
    pub const DEFAULT_GD_LR: f64 = 0.05;

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Newton { .. } => OptimizerKind::Newton,
            Optimizer::Adam(_) => OptimizerKind::Adam,
            Optimizer::Gd { .. } => OptimizerKind::Gd,
        }
    }

    pub fn with_defaults(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Newton => Optimizer::Newton { lr: 1.0 },
            OptimizerKind::Adam => Optimizer::Adam(AdamConfig::default()),
            OptimizerKind::Gd => Optimizer::Gd {
                lr: Self::DEFAULT_GD_LR,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub theta: Vec<f64>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub optimizer: OptimizerKind,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.loss)
    }

    pub fn final_theta(&self) -> &[f64] {
        self.points.last().map_or(&[], |p| &p.theta)
    }

    /// Columns `step, theta_0 … theta_{p−1}, loss`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let p = self.points.first().map_or(0, |pt| pt.theta.len());
        let mut header = vec!["step".to_string()];
        header.extend((0..p).map(|i| format!("theta_{i}")));
        header.push("loss".into());
        out.write_record(&header)?;
        for pt in &self.points {
            let mut rec = vec![pt.step.to_string()];
            rec.extend(pt.theta.iter().map(|v| v.to_string()));
            rec.push(pt.loss.to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Runs `steps` updates from `theta0`, recording the start point as step 0.
pub fn run_trajectory(
    landscape: &QuadraticLandscape,
    optimizer: &Optimizer,
    theta0: &[f64],
    steps: usize,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(GistError::arg("a trajectory needs at least one step"));
    }
    if theta0.len() != landscape.dim() {
        return Err(GistError::arg(format!(
            "start point has {} coordinates, expected {}",
            theta0.len(),
            landscape.dim()
        )));
    }
    let mut theta = theta0.to_vec();
    let mut points = vec![TrajectoryPoint {
        step: 0,
        theta: theta.clone(),
        loss: landscape.loss(&theta),
    }];
    let mut adam = match optimizer {
        Optimizer::Adam(cfg) => Some(AdamState::new(*cfg, theta.len())),
        _ => None,
    };
    for step in 1..=steps {
        match optimizer {
            Optimizer::Newton { lr } => theta = newton_step(landscape, &theta, *lr),
            Optimizer::Gd { lr } => {
                let g = landscape.gradient(&theta);
                for (t, gi) in theta.iter_mut().zip(&g) {
                    *t -= lr * gi;
                }
            }
            Optimizer::Adam(_) => {
                let g = landscape.gradient(&theta);
                adam.as_mut().expect("adam state").step(&mut theta, &g);
            }
        }
        let loss = landscape.loss(&theta);
        if !loss.is_finite() {
            return Err(GistError::Divergence {
                step,
                reason: format!("loss became {loss}"),
            });
        }
        points.push(TrajectoryPoint {
            step,
            theta: theta.clone(),
            loss,
        });
    }
    Ok(Trajectory {
        points,
        optimizer: optimizer.kind(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalFloor {
    /// `min_D ‖H − D‖_F²`.
    pub minimum: f64,
    /// `2ρ²`.
    pub floor: f64,
    pub optimal_diagonal: [f64; 2],
}

/// `‖H − diag(d₁, d₂)‖_F²` for `H = [[1, ρ], [ρ, 1]]`.
pub fn diagonal_error(rho: f64, d1: f64, d2: f64) -> f64 {
    (1.0 - d1).powi(2) + (1.0 - d2).powi(2) + 2.0 * rho * rho
}

pub fn diagonal_floor(rho: f64) -> DiagonalFloor {
    let optimal_diagonal = [1.0, 1.0];
    DiagonalFloor {
        minimum: diagonal_error(rho, optimal_diagonal[0], optimal_diagonal[1]),
        floor: 2.0 * rho * rho,
        optimal_diagonal,
    }
}
