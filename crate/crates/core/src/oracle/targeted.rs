//! Seeded targeted-selection task: a mixed candidate pool, a small target set, and three ways of
//! picking a training budget from the pool.
//!
//! The pool mixes clean on-target examples, examples from an unrelated domain (shifted features,
//! independent teacher) and on-target features carrying uniformly random labels.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::gradstore::GradientMatrix;
use crate::linalg::{dot, norm, Matrix};
use crate::oracle::nll::{
    random_matrix, sample_categorical, sample_examples, softmax, train, warmup_train,
    LabeledExample, NllToyModel, TrainConfig, WarmupConfig,
};
use crate::oracle::suites::rng_for;
use crate::pipeline::{select_in_memory, Budget, PipelineOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    OnTarget,
    OffTarget,
    NoisyLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TargetedTaskConfig {
    pub n_features: usize,
    pub n_classes: usize,
    pub pool_size: usize,
    pub on_target_fraction: f64,
    pub noisy_fraction: f64,
    /// Dimension of the subspace on-target features concentrate around.
    pub target_feature_rank: usize,
    /// Isotropic noise added to on-target features off their subspace.
    pub target_feature_noise: f64,
    /// Distance of the off-target feature mean from the origin.
    pub off_target_shift: f64,
    pub teacher_scale: f64,
    pub n_targets: usize,
    pub n_test: usize,
    pub budget_fraction: f64,
    pub warmup: WarmupConfig,
    pub train: TrainConfig,
}

impl Default for TargetedTaskConfig {
    fn default() -> Self {
        Self {
            n_features: 8,
            n_classes: 4,
            pool_size: 2000,
            on_target_fraction: 0.2,
            noisy_fraction: 0.3,
            target_feature_rank: 3,
            target_feature_noise: 0.1,
            off_target_shift: 3.0,
            teacher_scale: 1.5,
            n_targets: 50,
            n_test: 2000,
            budget_fraction: 0.05,
            warmup: WarmupConfig::default(),
            train: TrainConfig {
                epochs: 10,
                ..TrainConfig::default()
            },
        }
    }
}

pub struct TargetedTask {
    pub model: NllToyModel,
    pub pool: Vec<LabeledExample>,
    pub origins: Vec<Origin>,
    pub targets: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub theta0: Vec<f64>,
}

impl TargetedTask {
    pub fn generate(seed: u64, config: &TargetedTaskConfig) -> Result<Self> {
        let (d, c) = (config.n_features, config.n_classes);
        let fractions_ok = (0.0..=1.0).contains(&config.on_target_fraction)
            && (0.0..=1.0).contains(&config.noisy_fraction)
            && config.on_target_fraction + config.noisy_fraction <= 1.0;
        if config.target_feature_rank == 0 || config.target_feature_rank > d {
            return Err(GistError::arg(format!(
                "target feature rank must lie in 1..={d}"
            )));
        }
        if !fractions_ok || config.pool_size == 0 || config.n_targets == 0 || config.n_test == 0 {
            return Err(GistError::arg(
                "targeted task needs a nonempty pool, targets and test set with valid fractions",
            ));
        }
        let mut rng = rng_for(seed, 7);
        let model = NllToyModel::linear(d, c)?;
        let target_teacher = random_matrix(&mut rng, c, d, config.teacher_scale);
        let off_teacher = random_matrix(&mut rng, c, d, config.teacher_scale);
        let basis = random_orthonormal_columns(&mut rng, d, config.target_feature_rank);
        let spread = (d as f64 / config.target_feature_rank as f64).sqrt();
        let on_target = TargetDomain {
            basis: &basis,
            spread,
            noise: config.target_feature_noise,
        };
        let off_direction: Vec<f64> = random_matrix(&mut rng, 1, d, 1.0).as_slice().to_vec();
        let scale = config.off_target_shift / norm(&off_direction);
        let off_mean: Vec<f64> = off_direction.iter().map(|v| v * scale).collect();

        let n_on = (config.on_target_fraction * config.pool_size as f64).round() as usize;
        let n_noisy = ((config.noisy_fraction * config.pool_size as f64).round() as usize)
            .min(config.pool_size - n_on);
        let n_off = config.pool_size - n_on - n_noisy;
        let mut tagged: Vec<(LabeledExample, Origin)> = Vec::with_capacity(config.pool_size);
        tagged.extend(
            on_target
                .sample(&mut rng, &target_teacher, n_on)
                .into_iter()
                .map(|e| (e, Origin::OnTarget)),
        );
        tagged.extend(
            sample_examples(&mut rng, &off_teacher, &off_mean, n_off)
                .into_iter()
                .map(|e| (e, Origin::OffTarget)),
        );
        for mut e in on_target.sample(&mut rng, &target_teacher, n_noisy) {
            e.label = rng.random_range(0..c);
            tagged.push((e, Origin::NoisyLabel));
        }
        let order = sample(&mut rng, tagged.len(), tagged.len()).into_vec();
        let (pool, origins) = order.into_iter().map(|i| tagged[i].clone()).unzip();

        let targets = on_target.sample(&mut rng, &target_teacher, config.n_targets);
        let test = on_target.sample(&mut rng, &target_teacher, config.n_test);
        let theta0 = random_matrix(&mut rng, 1, model.parameter_dim(), 0.1)
            .as_slice()
            .to_vec();
        Ok(Self {
            model,
            pool,
            origins,
            targets,
            test,
            theta0,
        })
    }

    pub fn pool_ids(&self) -> Vec<String> {
        (0..self.pool.len())
            .map(|i| format!("cand-{i:05}"))
            .collect()
    }

    pub fn target_ids(&self) -> Vec<String> {
        (0..self.targets.len())
            .map(|i| format!("target-{i:03}"))
            .collect()
    }

    fn gradients(
        &self,
        theta: &[f64],
        data: &[LabeledExample],
        ids: Vec<String>,
        tag: &str,
    ) -> Result<GradientMatrix> {
        let g: Matrix = self.model.per_example_gradients(theta, data)?;
        let rows: Vec<Vec<f64>> = (0..g.rows()).map(|i| g.row(i).to_vec()).collect();
        GradientMatrix::from_f64_rows(&rows, ids, tag)
    }

    pub fn target_gradients(&self, theta: &[f64], tag: &str) -> Result<GradientMatrix> {
        self.gradients(theta, &self.targets, self.target_ids(), tag)
    }

    pub fn pool_gradients(&self, theta: &[f64], tag: &str) -> Result<GradientMatrix> {
        self.gradients(theta, &self.pool, self.pool_ids(), tag)
    }
}

/// Features `spread · Q z + noise · ε` with `Q` orthonormal, `z` and `ε` standard normal.
struct TargetDomain<'a> {
    basis: &'a Matrix,
    spread: f64,
    noise: f64,
}

impl TargetDomain<'_> {
    fn sample<R: Rng>(&self, rng: &mut R, teacher: &Matrix, n: usize) -> Vec<LabeledExample> {
        let k = self.basis.cols();
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..k)
                    .map(|_| self.spread * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut features = self.basis.matvec(&z);
                for f in features.iter_mut() {
                    *f += self.noise * rng.sample::<f64, _>(StandardNormal);
                }
                let label = sample_categorical(rng, &softmax(&teacher.matvec(&features)));
                LabeledExample { features, label }
            })
            .collect()
    }
}

fn random_orthonormal_columns<R: Rng>(rng: &mut R, d: usize, k: usize) -> Matrix {
    let raw = random_matrix(rng, d, k, 1.0);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let mut v = raw.col(j);
        for q in &cols {
            let p = dot(&v, q);
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
        let n = norm(&v);
        cols.push(v.into_iter().map(|x| x / n).collect());
    }
    Matrix::from_fn(d, k, |i, j| cols[j][i])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    Gist,
    Random,
    GradientNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorOutcome {
    pub selector: Selector,
    pub test_loss: f64,
    pub on_target_selected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetedRun {
    pub seed: u64,
    pub budget: usize,
    pub outcomes: Vec<SelectorOutcome>,
}

impl TargetedRun {
    pub fn loss_of(&self, selector: Selector) -> f64 {
        self.outcomes
            .iter()
            .find(|o| o.selector == selector)
            .map_or(f64::NAN, |o| o.test_loss)
    }

    pub fn gist_beats(&self, baseline: Selector) -> bool {
        self.loss_of(Selector::Gist) < self.loss_of(baseline)
    }
}

/// Indices of the `k` largest gradient norms, ties to the lower index.
pub fn gradient_norm_top(gradients: &GradientMatrix, k: usize) -> Vec<usize> {
    let norms: Vec<f64> = (0..gradients.n_rows())
        .map(|i| norm(&gradients.row_f64(i)))
        .collect();
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Warm up on the pool, select with each selector, retrain from `θ₀` on each selection and
/// report the held-out target loss.
pub fn run_targeted(
    seed: u64,
    config: &TargetedTaskConfig,
    pipeline: &PipelineOptions,
) -> Result<TargetedRun> {
    let task = TargetedTask::generate(seed, config)?;
    let mut rng = rng_for(seed, 8);
    let warm = warmup_train(
        &task.model,
        &task.pool,
        &task.theta0,
        &config.warmup,
        &mut rng,
    )?;
    let tag = format!("warmup-seed-{seed}");
    let targets = task.target_gradients(&warm.theta, &tag)?;
    let candidates = task.pool_gradients(&warm.theta, &tag)?;
    let budget = Budget::Fraction(config.budget_fraction).resolve(task.pool.len())?;

    let gist = select_in_memory(&targets, &candidates, Budget::Count(budget), pipeline)?
        .selection
        .indices;
    let random = {
        let mut v = sample(&mut rng, task.pool.len(), budget).into_vec();
        v.sort_unstable();
        v
    };
    let by_norm = gradient_norm_top(&candidates, budget);

    let mut outcomes = Vec::with_capacity(3);
    for (selector, chosen) in [
        (Selector::Gist, gist),
        (Selector::Random, random),
        (Selector::GradientNorm, by_norm),
    ] {
        let subset: Vec<LabeledExample> = chosen.iter().map(|&i| task.pool[i].clone()).collect();
        let mut train_rng = rng_for(seed, 9);
        let fit = train(
            &task.model,
            &subset,
            &task.theta0,
            &config.train,
            &mut train_rng,
        )?;
        outcomes.push(SelectorOutcome {
            selector,
            test_loss: task.model.loss(&fit.theta, &task.test)?,
            on_target_selected: chosen
                .iter()
                .filter(|&&i| task.origins[i] == Origin::OnTarget)
                .count(),
        });
    }
    Ok(TargetedRun {
        seed,
        budget,
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_composition() {
        let cfg = TargetedTaskConfig {
            pool_size: 100,
            ..TargetedTaskConfig::default()
        };
        let task = TargetedTask::generate(3, &cfg).unwrap();
        let count = |o| task.origins.iter().filter(|&&x| x == o).count();
        assert_eq!(count(Origin::OnTarget), 20);
        assert_eq!(count(Origin::NoisyLabel), 30);
        assert_eq!(count(Origin::OffTarget), 50);
        assert_eq!(task.targets.len(), 50);
        let again = TargetedTask::generate(3, &cfg).unwrap();
        assert_eq!(task.pool, again.pool);
    }

    #[test]
    fn rejects_bad_fractions() {
        let cfg = TargetedTaskConfig {
            on_target_fraction: 0.8,
            noisy_fraction: 0.5,
            ..TargetedTaskConfig::default()
        };
        assert!(TargetedTask::generate(0, &cfg).is_err());
    }

    #[test]
    fn norm_ranking_breaks_ties_by_index() {
        let rows = vec![
            vec![1.0, 0.0],
            vec![0.0, 3.0],
            vec![3.0, 0.0],
            vec![0.5, 0.0],
        ];
        let ids = (0..4).map(|i| i.to_string()).collect();
        let g = GradientMatrix::from_f64_rows(&rows, ids, "t").unwrap();
        assert_eq!(gradient_norm_top(&g, 3), vec![1, 2, 0]);
    }
}
