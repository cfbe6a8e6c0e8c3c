//! Curvature-preconditioned influence `g_valᵀ H† g` and its magnitude/direction split.

use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::linalg::{self, dot, norm, Matrix};
use crate::oracle::nll::{LabeledExample, NllToyModel};

fn check_dims(g_val: &[f64], hessian: &Matrix, g: &[f64]) -> Result<()> {
    if g_val.len() != g.len() || !hessian.is_square() || hessian.rows() != g.len() {
        return Err(GistError::arg(format!(
            "gradients of length {} and {} against a {}x{} Hessian",
            g_val.len(),
            g.len(),
            hessian.rows(),
            hessian.cols()
        )));
    }
    Ok(())
}

/// `g_valᵀ H† g`.
pub fn influence_score(
    validation_gradient: &[f64],
    hessian: &Matrix,
    candidate_gradient: &[f64],
) -> Result<f64> {
    check_dims(validation_gradient, hessian, candidate_gradient)?;
    let pinv = linalg::pseudo_inverse_symmetric(hessian);
    Ok(dot(validation_gradient, &pinv.matvec(candidate_gradient)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityDecomposition {
    pub magnitude_val: f64,
    pub magnitude_cand: f64,
    /// 0 when either preconditioned vector vanishes.
    pub cosine: f64,
}

impl UtilityDecomposition {
    pub fn product(&self) -> f64 {
        self.magnitude_val * self.magnitude_cand * self.cosine
    }
}

/// `‖g̃_val‖ · ‖g̃‖ · cos∠(g̃_val, g̃)` with `g̃ = (H†)^{1/2} g`.
pub fn decompose_utility(
    validation_gradient: &[f64],
    candidate_gradient: &[f64],
    hessian: &Matrix,
) -> Result<UtilityDecomposition> {
    check_dims(validation_gradient, hessian, candidate_gradient)?;
    let root = linalg::pseudo_inverse_sqrt_psd(hessian);
    let tv = root.matvec(validation_gradient);
    let tc = root.matvec(candidate_gradient);
    let (nv, nc) = (norm(&tv), norm(&tc));
    let cosine = if nv > 0.0 && nc > 0.0 {
        dot(&tv, &tc) / (nv * nc)
    } else {
        0.0
    };
    Ok(UtilityDecomposition {
        magnitude_val: nv,
        magnitude_cand: nc,
        cosine,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionCheck {
    /// `−η g_valᵀ H† g`.
    pub predicted: f64,
    /// `L_val(θ − η H† g) − L_val(θ)`.
    pub actual: f64,
}

/// Validation-side quantities shared by many prediction checks at one checkpoint.
#[derive(Clone, Debug)]
pub struct InfluenceProbe {
    theta: Vec<f64>,
    hessian_pinv: Matrix,
    val_gradient: Vec<f64>,
    val_loss: f64,
}

impl InfluenceProbe {
    /// Preconditions with the exact validation Hessian at `theta`.
    pub fn new(model: &NllToyModel, theta: &[f64], validation: &[LabeledExample]) -> Result<Self> {
        let hessian = model.curvature(theta, validation)?.hessian;
        Ok(Self {
            theta: theta.to_vec(),
            hessian_pinv: linalg::pseudo_inverse_symmetric(&hessian),
            val_gradient: model.gradient(theta, validation)?,
            val_loss: model.loss(theta, validation)?,
        })
    }

    pub fn check(
        &self,
        model: &NllToyModel,
        validation: &[LabeledExample],
        candidate: &LabeledExample,
        lr: f64,
    ) -> Result<PredictionCheck> {
        let g = model.example_gradient(&self.theta, candidate);
        let direction = self.hessian_pinv.matvec(&g);
        let predicted = -lr * dot(&self.val_gradient, &direction);
        let moved: Vec<f64> = self
            .theta
            .iter()
            .zip(&direction)
            .map(|(t, d)| t - lr * d)
            .collect();
        let after = model.loss(&moved, validation)?;
        if !after.is_finite() {
            return Err(GistError::Divergence {
                step: 1,
                reason: format!("validation loss became {after}"),
            });
        }
        Ok(PredictionCheck {
            predicted,
            actual: after - self.val_loss,
        })
    }
}

pub fn influence_prediction_check(
    model: &NllToyModel,
    theta: &[f64],
    validation: &[LabeledExample],
    candidate: &LabeledExample,
    lr: f64,
) -> Result<PredictionCheck> {
    InfluenceProbe::new(model, theta, validation)?.check(model, validation, candidate, lr)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(GistError::arg(
            "Spearman needs two equal-length samples of size ≥ 2",
        ));
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    if da == 0.0 || db == 0.0 {
        return Err(GistError::arg(
            "Spearman is undefined for a constant sample",
        ));
    }
    Ok(num / (da * db).sqrt())
}
