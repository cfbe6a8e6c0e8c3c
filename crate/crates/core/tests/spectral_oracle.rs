//! Spectral module against dense SVD and eigen solvers from nalgebra.

use gist_core::linalg::Matrix;
use gist_core::spectral::{
    accumulate_gram, build_projector, davis_kahan_bound_check, principal_angles, project,
    reconstruction_error, GramMode, RankBranch,
};
use gist_core::{GradientMatrix, RankPolicy};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_pool(rng: &mut ChaCha8Rng, n: usize, d: usize) -> GradientMatrix {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    GradientMatrix::from_f64_rows(&rows, (0..n).map(|i| format!("t{i}")).collect(), "ck").unwrap()
}

fn dense(g: &GradientMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(g.n_rows(), g.dim(), |i, j| f64::from(g.row(i)[j]))
}

fn to_ours(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Right singular vectors (d × k) and singular values, descending.
fn dense_svd(g: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let svd = g.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let v = DMatrix::from_fn(g.ncols(), order.len(), |i, c| vt[(order[c], i)]);
    (v, order.iter().map(|&i| svd.singular_values[i]).collect())
}

fn full_rank_policy() -> RankPolicy {
    RankPolicy {
        variance_threshold: 1.0,
        fewshot_full_rank_below: 0,
        max_rank: None,
    }
}

fn cols(m: &Matrix, range: std::ops::Range<usize>) -> Matrix {
    m.select_columns(range)
}

#[test]
fn gram_basis_matches_dense_svd_on_fifty_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..50 {
        let n = rng.random_range(1..=32);
        let d = rng.random_range(1..=256);
        let g = random_pool(&mut rng, n, d);
        let (proj, report) = build_projector(&g, &full_rank_policy()).unwrap();
        let (v, sigma) = dense_svd(&dense(&g));
        let r = proj.rank();
        assert_eq!(r, n.min(d), "trial {trial}");
        for (a, b) in report.singular_values.iter().zip(&sigma) {
            assert!(
                (a - b).abs() <= 1e-9 * sigma[0],
                "trial {trial}: σ {a} vs {b}"
            );
        }
        let ours = proj.basis();
        let theirs = to_ours(&v);
        let mut start = 0;
        while start < r {
            let mut end = start + 1;
            while end < r && (sigma[end - 1] - sigma[end]) < 1e-6 * sigma[end - 1] {
                end += 1;
            }
            let dist =
                principal_angles(&cols(&ours, start..end), &cols(&theirs, start..end)).unwrap();
            let worst = dist.principal_angles.last().copied().unwrap();
            assert!(
                worst <= 1e-6,
                "trial {trial} block {start}..{end}: angle {worst:e}"
            );
            start = end;
        }
    }
}

#[test]
fn eckart_young_tail_sum_at_every_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..10 {
        let n = rng.random_range(2..=12);
        let d = rng.random_range(n..=40);
        let g = random_pool(&mut rng, n, d);
        let (_, sigma) = dense_svd(&dense(&g));
        let total: f64 = sigma.iter().map(|s| s * s).sum();
        for r in 1..=n {
            let policy = RankPolicy {
                max_rank: Some(r),
                ..full_rank_policy()
            };
            let (proj, _) = build_projector(&g, &policy).unwrap();
            assert_eq!(proj.rank(), r);
            let err = reconstruction_error(&proj, &g).unwrap();
            let tail: f64 = sigma[r..].iter().map(|s| s * s).sum();
            let rel = (err - tail).abs() / tail.max(1e-12 * total);
            assert!(rel <= 1e-8, "n={n} d={d} r={r}: {err} vs tail {tail}");
        }
    }
}

#[test]
fn truncated_svd_beats_random_bases() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_pool(&mut rng, 10, 30);
    let policy = RankPolicy {
        max_rank: Some(3),
        ..full_rank_policy()
    };
    let (proj, _) = build_projector(&g, &policy).unwrap();
    let optimum = reconstruction_error(&proj, &g).unwrap();
    for _ in 0..100 {
        let raw = DMatrix::from_fn(30, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = raw.qr().q();
        let columns: Vec<Vec<f64>> = (0..3)
            .map(|c| q.column(c).iter().copied().collect())
            .collect();
        let other =
            gist_core::TargetProjector::from_columns(columns, vec![1.0, 1.0, 1.0], "random")
                .unwrap();
        assert!(reconstruction_error(&other, &g).unwrap() >= optimum - 1e-9 * optimum);
    }
}

#[test]
fn full_rank_reconstruction_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_pool(&mut rng, 6, 20);
    let (proj, _) = build_projector(&g, &full_rank_policy()).unwrap();
    assert!(reconstruction_error(&proj, &g).unwrap() <= 1e-8);
}

#[test]
fn projector_is_idempotent_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let n = rng.random_range(1..=16);
        let d = rng.random_range(1..=48);
        let g = random_pool(&mut rng, n, d);
        let (proj, _) = build_projector(&g, &RankPolicy::default()).unwrap();
        let p = proj.projection_matrix();
        assert!(p.matmul(&p).max_abs_diff(&p) <= 1e-8);
        assert!(p.transpose().max_abs_diff(&p) <= 1e-8);
        let b = proj.basis();
        assert!(
            b.transpose()
                .matmul(&b)
                .max_abs_diff(&Matrix::identity(proj.rank()))
                <= 1e-8
        );
        for c in 0..proj.rank() {
            let col = proj.column(c);
            let big = col
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(big >= 0.0);
        }
    }
}

#[test]
fn projection_contracts_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = random_pool(&mut rng, 7, 25);
    let (proj, _) = build_projector(&g, &RankPolicy::default()).unwrap();
    let probes = random_pool(&mut rng, 1000, 25);
    let coords = project(&proj, &probes).unwrap();
    for i in 0..1000 {
        let before: f64 = probes.row_f64(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        let after: f64 = coords.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(after <= before * (1.0 + 1e-12));
    }
}

#[test]
fn chunked_gram_matches_whole_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = random_pool(&mut rng, 9, 40);
    let d = dense(&g);
    let oracle_row = &d * d.transpose();
    let oracle_col = d.transpose() * &d / 9.0;
    for chunk in [1, 4, 9] {
        let row =
            accumulate_gram(g.chunks(chunk).unwrap().into_iter().map(Ok), GramMode::Row).unwrap();
        let col =
            accumulate_gram(g.chunks(chunk).unwrap().into_iter().map(Ok), GramMode::Col).unwrap();
        let rel = |ours: &Matrix, theirs: &DMatrix<f64>| {
            ours.max_abs_diff(&to_ours(theirs)) / theirs.amax()
        };
        assert!(rel(&row, &oracle_row) <= 1e-10, "chunk {chunk}");
        assert!(rel(&col, &oracle_col) <= 1e-10, "chunk {chunk}");
    }
}

#[test]
fn davis_kahan_holds_on_500_random_perturbations() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..500 {
        let n = rng.random_range(3..=8);
        let r = rng.random_range(1..n);
        let q = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal))
            .qr()
            .q();
        let mut eig: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for e in eig.iter_mut().take(r) {
            *e += 4.0;
        }
        eig.sort_by(|a, b| b.total_cmp(a));
        let b =
            &q * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig.clone())) * q.transpose();
        let e_raw = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let e_sym = (&e_raw + e_raw.transpose()) / 2.0;
        let e_norm = SymmetricEigen::new(e_sym.clone()).eigenvalues.amax();
        let a = &b + e_sym * (0.1 / e_norm);
        let check = davis_kahan_bound_check(&to_ours(&a), &to_ours(&b), r).unwrap();
        assert!(check.gap >= 1.0 - 1e-9, "trial {trial}: gap {}", check.gap);
        assert!((check.perturbation_norm - 0.1).abs() < 1e-9);
        assert!(check.holds, "trial {trial}: {check:?}");
    }
}

#[test]
fn planar_rotation_angle() {
    for alpha in [0.0, 0.1, 0.7, 1.2, std::f64::consts::FRAC_PI_2 - 1e-3] {
        let line = Matrix::from_rows(&[vec![alpha.cos()], vec![alpha.sin()]]);
        let axis = Matrix::from_rows(&[vec![1.0], vec![0.0]]);
        let d = principal_angles(&line, &axis).unwrap();
        assert!((d.principal_angles[0] - alpha).abs() <= 1e-10, "{alpha}");
        assert!((d.sin_theta_max - alpha.sin()).abs() <= 1e-10);
    }
}

#[test]
fn nine_targets_keep_full_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g = random_pool(&mut rng, 9, 64);
    let (proj, report) = build_projector(&g, &RankPolicy::default()).unwrap();
    assert_eq!(proj.rank(), 9);
    assert_eq!(report.branch, RankBranch::FewShotOverride);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_threshold_never_lowers_rank(seed in 0u64..10_000, n in 16usize..40, t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_pool(&mut rng, n, 24);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let at = |t: f64| build_projector(&g, &RankPolicy { variance_threshold: t, ..RankPolicy::default() }).unwrap().0.rank();
        prop_assert!(at(lo) <= at(hi));
    }

    #[test]
    fn explained_variance_is_partial_sums(seed in 0u64..10_000, n in 1usize..20, d in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_pool(&mut rng, n, d);
        let (_, report) = build_projector(&g, &RankPolicy::default()).unwrap();
        let sq: Vec<f64> = report.singular_values.iter().map(|s| s * s).collect();
        let total: f64 = sq.iter().sum();
        let mut acc = 0.0;
        for (i, c) in report.explained_variance.iter().enumerate() {
            acc += sq[i];
            prop_assert!((c - acc / total).abs() <= 1e-12);
        }
        prop_assert!((report.explained_variance.last().unwrap() - 1.0).abs() <= 1e-12);
        prop_assert!(report.explained_variance.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(report.singular_values.windows(2).all(|w| w[0] >= w[1]));
    }
}
