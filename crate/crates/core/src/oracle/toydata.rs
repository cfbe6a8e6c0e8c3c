//! Desk-scale gradient pools drawn from the analytic models, with the ground truth needed to
//! recompute every stored row.

use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::gradstore::{save_features, GradientMatrix};
use crate::linalg::Matrix;
use crate::oracle::lora::LoraModel;
use crate::oracle::nll::{random_matrix, warmup_train, LabeledExample, NllInstance, WarmupConfig};
use crate::oracle::quadratic::QuadraticLandscape;
use crate::oracle::suites::rng_for;

pub const TARGET_FILE: &str = "targets.gist";
pub const CANDIDATE_FILE: &str = "candidates.gist";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Quadratic,
    Lora,
    Nll,
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyKind::Quadratic => "quadratic",
            ToyKind::Lora => "lora",
            ToyKind::Nll => "nll",
        })
    }
}

impl FromStr for ToyKind {
    type Err = GistError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(ToyKind::Quadratic),
            "lora" => Ok(ToyKind::Lora),
            "nll" => Ok(ToyKind::Nll),
            other => Err(GistError::arg(format!("unknown toy kind {other:?}"))),
        }
    }
}

/// Pool sizes per kind.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySizes {
    pub targets: usize,
    pub candidates: usize,
}

impl ToyKind {
    pub fn default_sizes(self) -> ToySizes {
        match self {
            ToyKind::Quadratic => ToySizes {
                targets: 8,
                candidates: 64,
            },
            ToyKind::Lora => ToySizes {
                targets: 6,
                candidates: 64,
            },
            ToyKind::Nll => ToySizes {
                targets: 9,
                candidates: 200,
            },
        }
    }
}

/// Everything needed to recompute the stored gradients exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruth {
    /// Example `i` has loss `½(θ − cᵢ)ᵀH(θ − cᵢ)`, minimized at `cᵢ`, gradient `H(θ − cᵢ)`.
    Quadratic {
        hessian: Vec<Vec<f64>>,
        checkpoint: Vec<f64>,
        target_centers: Vec<Vec<f64>>,
        candidate_centers: Vec<Vec<f64>>,
    },
    /// Example `i` has loss `½ wᵀH_W w + cᵢᵀw` at `w = vec(W₀ + BA)`; features are `∂/∂A` row-major.
    Lora {
        w0: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        a: Vec<Vec<f64>>,
        h_w: Vec<Vec<f64>>,
        target_linear: Vec<Vec<f64>>,
        candidate_linear: Vec<Vec<f64>>,
        /// `∂²/∂A²` of the composed loss, indexed like the features.
        a_hessian: Vec<Vec<f64>>,
    },
    /// Linear multinomial-logit model with row-major `θ = W` at a warmup checkpoint.
    Nll {
        n_features: usize,
        n_classes: usize,
        checkpoint: Vec<f64>,
        targets: Vec<LabeledExample>,
        candidates: Vec<LabeledExample>,
        /// Exact mean Hessian over the target examples.
        target_hessian: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub kind: ToyKind,
    pub seed: u64,
    pub targets: GradientMatrix,
    pub candidates: GradientMatrix,
    pub truth: GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyPaths {
    pub targets: PathBuf,
    pub candidates: PathBuf,
    pub truth: PathBuf,
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn ids(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}-{i:05}")).collect()
}

fn gaussian_rows<R: Rng>(rng: &mut R, n: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    rows_of(&random_matrix(rng, n, dim, scale))
}

pub fn generate_toy(kind: ToyKind, seed: u64, sizes: ToySizes) -> Result<ToyDataset> {
    if sizes.targets == 0 {
        return Err(GistError::arg("a toy pool needs at least one target"));
    }
    let mut rng = rng_for(seed, 11);
    let tag = format!("{kind}-seed-{seed}");
    let (target_rows, candidate_rows, truth) = match kind {
        ToyKind::Quadratic => {
            let land = QuadraticLandscape::coupled();
            let checkpoint = random_matrix(&mut rng, 1, land.dim(), 1.0)
                .as_slice()
                .to_vec();
            let target_centers = gaussian_rows(&mut rng, sizes.targets, land.dim(), 1.0);
            let candidate_centers = gaussian_rows(&mut rng, sizes.candidates, land.dim(), 1.0);
            let grad = |c: &Vec<f64>| {
                let shifted: Vec<f64> = checkpoint.iter().zip(c).map(|(t, ci)| t - ci).collect();
                land.gradient(&shifted)
            };
            let t: Vec<_> = target_centers.iter().map(grad).collect();
            let c: Vec<_> = candidate_centers.iter().map(grad).collect();
            let truth = GroundTruth::Quadratic {
                hessian: rows_of(land.hessian()),
                checkpoint: checkpoint.clone(),
                target_centers,
                candidate_centers,
            };
            (t, c, truth)
        }
        ToyKind::Lora => {
            let model = LoraModel::random(&mut rng, 3, 4, 2, true);
            let p = model.d_out() * model.d_in();
            let target_linear = gaussian_rows(&mut rng, sizes.targets, p, 1.0);
            let candidate_linear = gaussian_rows(&mut rng, sizes.candidates, p, 1.0);
            let t: Vec<_> = target_linear
                .iter()
                .map(|c| lora_a_gradient(&model, c))
                .collect();
            let c: Vec<_> = candidate_linear
                .iter()
                .map(|c| lora_a_gradient(&model, c))
                .collect();
            let truth = GroundTruth::Lora {
                w0: rows_of(model.w0()),
                b: rows_of(model.b()),
                a: rows_of(model.a()),
                h_w: rows_of(model.h_w()),
                target_linear,
                candidate_linear,
                a_hessian: rows_of(&lora_a_hessian(&model)),
            };
            (t, c, truth)
        }
        ToyKind::Nll => {
            let inst = NllInstance::linear(&mut rng, 5, 3, sizes.candidates, sizes.targets);
            let warm = warmup_train(
                &inst.model,
                &inst.train,
                &inst.theta0,
                &WarmupConfig::default(),
                &mut rng,
            )?;
            let theta = warm.theta;
            let t = rows_of(&inst.model.per_example_gradients(&theta, &inst.validation)?);
            let c = if inst.train.is_empty() {
                Vec::new()
            } else {
                rows_of(&inst.model.per_example_gradients(&theta, &inst.train)?)
            };
            let truth = GroundTruth::Nll {
                n_features: inst.model.n_features(),
                n_classes: inst.model.n_classes(),
                target_hessian: rows_of(&inst.model.curvature(&theta, &inst.validation)?.hessian),
                checkpoint: theta,
                targets: inst.validation,
                candidates: inst.train,
            };
            (t, c, truth)
        }
    };
    let dim = target_rows[0].len();
    let targets =
        GradientMatrix::from_f64_rows(&target_rows, ids("target", target_rows.len()), tag.clone())?;
    let candidates = if candidate_rows.is_empty() {
        GradientMatrix::empty(dim, tag)?
    } else {
        GradientMatrix::from_f64_rows(&candidate_rows, ids("cand", candidate_rows.len()), tag)?
    };
    Ok(ToyDataset {
        kind,
        seed,
        targets,
        candidates,
        truth,
    })
}

/// `∂L/∂A = Bᵀ mat(H_W w + c)`, flattened row-major.
fn lora_a_gradient(model: &LoraModel, linear: &[f64]) -> Vec<f64> {
    let w = model.weight_with(model.a());
    let (d_out, d_in) = (model.d_out(), model.d_in());
    let mut wv = vec![0.0; d_out * d_in];
    for j in 0..d_in {
        for i in 0..d_out {
            wv[model.vec_index(i, j)] = w[(i, j)];
        }
    }
    let hw = model.h_w().matvec(&wv);
    let mut out = vec![0.0; model.rank() * d_in];
    for k in 0..model.rank() {
        for j in 0..d_in {
            out[k * d_in + j] = (0..d_out)
                .map(|i| {
                    model.b()[(i, k)] * (hw[model.vec_index(i, j)] + linear[model.vec_index(i, j)])
                })
                .sum();
        }
    }
    out
}

/// Full `∂²L/∂A²`, including cross-row blocks `(e_{j₁} ⊗ B_{:k₁})ᵀ H_W (e_{j₂} ⊗ B_{:k₂})`.
fn lora_a_hessian(model: &LoraModel) -> Matrix {
    let d_in = model.d_in();
    let n = model.rank() * d_in;
    let dirs: Vec<Vec<f64>> = (0..n)
        .map(|q| model.a_direction(q / d_in, q % d_in))
        .collect();
    let hd: Vec<Vec<f64>> = dirs.iter().map(|d| model.h_w().matvec(d)).collect();
    Matrix::from_fn(n, n, |p, q| crate::linalg::dot(&dirs[p], &hd[q]))
}

impl ToyDataset {
    /// Writes both feature files (with manifests) and the ground-truth JSON into `dir`.
    pub fn write(&self, dir: &Path) -> Result<ToyPaths> {
        std::fs::create_dir_all(dir)?;
        let paths = ToyPaths {
            targets: dir.join(TARGET_FILE),
            candidates: dir.join(CANDIDATE_FILE),
            truth: dir.join(TRUTH_FILE),
        };
        save_features(&self.targets, &paths.targets)?;
        save_features(&self.candidates, &paths.candidates)?;
        let mut w = BufWriter::new(File::create(&paths.truth)?);
        serde_json::to_writer_pretty(
            &mut w,
            &ToySidecar {
                seed: self.seed,
                truth: &self.truth,
            },
        )?;
        std::io::Write::flush(&mut w)?;
        Ok(paths)
    }
}

#[derive(Serialize)]
struct ToySidecar<'a> {
    seed: u64,
    #[serde(flatten)]
    truth: &'a GroundTruth,
}
