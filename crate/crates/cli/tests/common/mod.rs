//! Helpers shared by the CLI integration tests and the acceptance harness.

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use gist_core::GradientMatrix;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn gist(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gist"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn gist")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn random_pool(seed: u64, n: usize, d: usize, prefix: &str) -> GradientMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let ids = (0..n).map(|i| format!("{prefix}-{i:05}")).collect();
    GradientMatrix::new(values, d, ids, "ckpt").unwrap()
}

fn to_dense(m: &GradientMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(m.n_rows(), m.dim(), |i, j| f64::from(m.row(i)[j]))
}

#[derive(Debug, PartialEq)]
pub struct DenseSelection {
    pub rank: usize,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Full SVD of the targets, projection onto the leading right singular vectors, row-normalized
/// cosines against every target, best match per candidate, stable sort.
pub fn dense_select(
    targets: &GradientMatrix,
    candidates: &GradientMatrix,
    variance_threshold: f64,
    fewshot_below: usize,
    k: usize,
) -> DenseSelection {
    let t = to_dense(targets);
    let svd = t.clone().svd(false, true);
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sigma: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let numerical = sigma.iter().filter(|&&s| s > 1e-8 * sigma[0]).count();
    let rank = if targets.n_rows() < fewshot_below {
        numerical
    } else {
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        let mut acc = 0.0;
        let mut r = sigma.len();
        for (i, s) in sigma.iter().enumerate() {
            acc += s * s;
            if acc / total >= variance_threshold {
                r = i + 1;
                break;
            }
        }
        r.min(numerical)
    };
    let v_t = svd.v_t.unwrap();
    let basis = DMatrix::from_fn(targets.dim(), rank, |i, c| v_t[(order[c], i)]);
    let normalize = |m: DMatrix<f64>| {
        let mut m = m;
        for mut row in m.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        m
    };
    let pt = normalize(&t * &basis);
    let pc = normalize(to_dense(candidates) * &basis);
    let cos = &pc * pt.transpose();
    let best: Vec<f64> = cos.row_iter().map(|r| r.max()).collect();
    let mut idx: Vec<usize> = (0..best.len()).collect();
    idx.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    idx.truncate(k);
    DenseSelection {
        rank,
        ids: idx
            .iter()
            .map(|&i| candidates.example_ids()[i].clone())
            .collect(),
        scores: idx.iter().map(|&i| best[i]).collect(),
    }
}

/// `(ids, scores)` from a `selection.json`.
pub fn read_selection(path: &Path) -> (Vec<String>, Vec<f64>) {
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let items = v["selected"].as_array().unwrap();
    (
        items
            .iter()
            .map(|i| i["id"].as_str().unwrap().to_string())
            .collect(),
        items.iter().map(|i| i["score"].as_f64().unwrap()).collect(),
    )
}
