//! End-to-end runs of the `gist` binary.

mod common;

use std::fs;
use std::path::Path;

use common::{dense_select, gist, random_pool, read_selection, stderr};
use gist_core::gradstore::{save_features, FeatureReader, PoolKind};
use gist_core::oracle::quadratic::TOY_START;
use gist_core::oracle::{run_trajectory, AdamConfig, Optimizer, QuadraticLandscape};
use gist_core::GradientMatrix;

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gist(dir, args);
    assert!(
        out.status.success(),
        "gist {args:?} failed: {}",
        stderr(&out)
    );
    stderr(&out)
}

fn read(path: &Path) -> GradientMatrix {
    FeatureReader::open(path, PoolKind::Target)
        .unwrap()
        .read(None)
        .unwrap()
}

fn trajectory_rows(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn gen_toy_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["--seed", "7", "--out", "a", "gen-toy", "--kind", "nll"],
    );
    ok(
        d,
        &["--seed", "7", "--out", "b", "gen-toy", "--kind", "nll"],
    );
    ok(
        d,
        &["--seed", "8", "--out", "c", "gen-toy", "--kind", "nll"],
    );
    for f in [
        "targets.gist",
        "targets.gist.manifest.jsonl",
        "candidates.gist",
        "truth.json",
    ] {
        assert_eq!(
            fs::read(d.join("a").join(f)).unwrap(),
            fs::read(d.join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(d.join("a/targets.gist")).unwrap(),
        fs::read(d.join("c/targets.gist")).unwrap()
    );
    let targets = read(&d.join("a/targets.gist"));
    assert_eq!(targets.n_rows(), 9);
    assert_eq!(targets.dim(), 15);
    assert_eq!(targets.checkpoint_tag(), "nll-seed-7");

    ok(
        d,
        &[
            "--out",
            "q",
            "gen-toy",
            "--kind",
            "quadratic",
            "--targets",
            "3",
            "--candidates",
            "5",
        ],
    );
    assert_eq!(read(&d.join("q/candidates.gist")).n_rows(), 5);
    ok(d, &["--out", "l", "gen-toy", "--kind", "lora"]);
    assert_eq!(read(&d.join("l/targets.gist")).dim(), 8);
}

#[test]
fn spectrum_reports_branch_and_rank() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "toy", "gen-toy", "--kind", "nll"]);
    let err = ok(
        d,
        &["--out", "s", "spectrum", "--targets", "toy/targets.gist"],
    );
    assert!(err.contains("few-shot override, r=9"), "{err}");
    let mut rows = csv::Reader::from_path(d.join("s/spectrum.csv")).unwrap();
    let last = rows.records().last().unwrap().unwrap();
    let cumulative: f64 = last[2].parse().unwrap();
    assert!((cumulative - 1.0).abs() <= 1e-12);
    assert!(d.join("s/projector.gistproj").exists());

    let direction = [0.3f64, -1.2, 0.5, 2.0];
    let rows: Vec<Vec<f64>> = (1..=20)
        .map(|i| direction.iter().map(|x| x * f64::from(i)).collect())
        .collect();
    let parallel =
        GradientMatrix::from_f64_rows(&rows, (0..20).map(|i| format!("t{i}")).collect(), "p")
            .unwrap();
    save_features(&parallel, &d.join("parallel.gist")).unwrap();
    let err = ok(d, &["--out", "p", "spectrum", "--targets", "parallel.gist"]);
    assert!(err.contains("variance threshold, r=1"), "{err}");
    let err = ok(
        d,
        &[
            "--out",
            "p",
            "spectrum",
            "--targets",
            "toy/targets.gist",
            "--max-rank",
            "4",
        ],
    );
    assert!(err.contains("r=4"), "{err}");
}

#[test]
fn select_matches_the_dense_reference() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "toy", "gen-toy", "--kind", "nll"]);
    ok(
        d,
        &[
            "--out",
            "sel",
            "select",
            "--targets",
            "toy/targets.gist",
            "--candidates",
            "toy/candidates.gist",
            "--k",
            "20",
        ],
    );
    let (ids, scores) = read_selection(&d.join("sel/selection.json"));
    let reference = dense_select(
        &read(&d.join("toy/targets.gist")),
        &read(&d.join("toy/candidates.gist")),
        0.95,
        16,
        20,
    );
    assert_eq!(reference.rank, 9);
    assert_eq!(ids, reference.ids);
    for (a, b) in scores.iter().zip(&reference.scores) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
    let table = fs::read_to_string(d.join("sel/scores.csv")).unwrap();
    assert_eq!(table.lines().count(), 201);
}

#[test]
fn select_edge_budgets_and_self_matches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let targets = random_pool(1, 6, 10, "t");
    let mut rows: Vec<Vec<f64>> = (0..targets.n_rows()).map(|i| targets.row_f64(i)).collect();
    let others = random_pool(2, 30, 10, "x");
    rows.extend((0..30).map(|i| others.row_f64(i)));
    let candidates =
        GradientMatrix::from_f64_rows(&rows, (0..36).map(|i| format!("c{i:02}")).collect(), "ckpt")
            .unwrap();
    save_features(&targets, &d.join("t.gist")).unwrap();
    save_features(&candidates, &d.join("c.gist")).unwrap();

    ok(
        d,
        &[
            "--out",
            "zero",
            "select",
            "--targets",
            "t.gist",
            "--candidates",
            "c.gist",
            "--k",
            "0",
        ],
    );
    let (ids, _) = read_selection(&d.join("zero/selection.json"));
    assert!(ids.is_empty());

    ok(
        d,
        &[
            "--out",
            "self",
            "select",
            "--targets",
            "t.gist",
            "--candidates",
            "c.gist",
            "--k",
            "6",
        ],
    );
    let (ids, scores) = read_selection(&d.join("self/selection.json"));
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(
        sorted,
        (0..6).map(|i| format!("c{i:02}")).collect::<Vec<_>>()
    );
    assert!(
        scores.iter().all(|s| (s - 1.0).abs() <= 1e-12),
        "{scores:?}"
    );

    ok(
        d,
        &[
            "--out",
            "all",
            "select",
            "--targets",
            "t.gist",
            "--candidates",
            "c.gist",
            "--k",
            "100",
        ],
    );
    assert_eq!(read_selection(&d.join("all/selection.json")).0.len(), 36);
    ok(
        d,
        &[
            "--out",
            "frac",
            "select",
            "--targets",
            "t.gist",
            "--candidates",
            "c.gist",
            "--fraction",
            "0.25",
            "--keep-pairwise",
        ],
    );
    assert_eq!(read_selection(&d.join("frac/selection.json")).0.len(), 9);
    let pairwise = read(&d.join("frac/pairwise.gist"));
    assert_eq!((pairwise.n_rows(), pairwise.dim()), (36, 6));
}

#[test]
fn select_output_ignores_workers_and_chunking() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    save_features(&random_pool(3, 24, 40, "t"), &d.join("t.gist")).unwrap();
    save_features(&random_pool(4, 333, 40, "c"), &d.join("c.gist")).unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "3"] {
        for chunk in ["1", "5", "4096"] {
            let out = format!("w{workers}c{chunk}");
            ok(
                d,
                &[
                    "--workers",
                    workers,
                    "--chunk-rows",
                    chunk,
                    "--out",
                    &out,
                    "select",
                    "--targets",
                    "t.gist",
                    "--candidates",
                    "c.gist",
                    "--k",
                    "40",
                ],
            );
            let sel = fs::read(d.join(&out).join("selection.json")).unwrap();
            let scores = fs::read(d.join(&out).join("scores.csv")).unwrap();
            outputs.push((sel, scores));
        }
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn resolved_config_replays() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "toy", "gen-toy", "--kind", "quadratic"]);
    ok(
        d,
        &[
            "--seed",
            "3",
            "--chunk-rows",
            "7",
            "--out",
            "first",
            "select",
            "--targets",
            "toy/targets.gist",
            "--candidates",
            "toy/candidates.gist",
            "--k",
            "5",
            "--variance-threshold",
            "0.5",
        ],
    );
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("first/resolved_config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["command"]["name"], "select");
    assert_eq!(resolved["seed"], 3);
    assert_eq!(resolved["chunk_rows"], 7);
    assert_eq!(resolved["budget"]["count"], 5);
    assert_eq!(resolved["rank_policy"]["variance_threshold"], 0.5);
    ok(
        d,
        &[
            "--config",
            "first/resolved_config.json",
            "--out",
            "second",
            "select",
        ],
    );
    for f in ["selection.json", "scores.csv", "spectrum.csv"] {
        assert_eq!(
            fs::read(d.join("first").join(f)).unwrap(),
            fs::read(d.join("second").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = ok(
        d,
        &["--out", "v", "verify", "--theorem", "t2", "--seeds", "5"],
    );
    assert!(err.contains("t2: 5 passed"), "{err}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("v/verify_report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["suites"][0]["instances"], 5);

    let err = ok(
        d,
        &[
            "--out",
            "v3",
            "verify",
            "--theorem",
            "t3",
            "--seeds",
            "2",
            "--dk-trials",
            "10",
            "--inject-degenerate",
        ],
    );
    assert!(err.contains("12 passed, 1 skipped, 0 failed"), "{err}");

    ok(d, &["--out", "g", "verify", "--theorem", "toy-geometry"]);

    let bad = gist(d, &["verify", "--theorem", "t9"]);
    assert_eq!(bad.status.code(), Some(2));
    let missing = gist(d, &["--out", "m", "spectrum", "--targets", "nope.gist"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("nope.gist"));
    let no_targets = gist(d, &["--out", "m", "select"]);
    assert_eq!(no_targets.status.code(), Some(2));
    let zero_workers = gist(d, &["--workers", "0", "toy-optim"]);
    assert_eq!(zero_workers.status.code(), Some(2));
}

#[test]
fn toy_optim_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "--out",
            "n",
            "toy-optim",
            "--optimizer",
            "newton",
            "--steps",
            "1",
        ],
    );
    let rows = trajectory_rows(&d.join("n/trajectory.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1..3], TOY_START);
    assert!(rows[1][3] <= 1e-18);

    ok(d, &["--out", "a", "toy-optim"]);
    let resolved = fs::read_to_string(d.join("a/resolved_config.json")).unwrap();
    assert!(
        resolved.contains("\"landscape\": \"coupled\"")
            && resolved.contains("\"optimizer\": \"adam\"")
    );
    let rows = trajectory_rows(&d.join("a/trajectory.csv"));
    let reference = run_trajectory(
        &QuadraticLandscape::coupled(),
        &Optimizer::Adam(AdamConfig::default()),
        &TOY_START,
        45,
    )
    .unwrap();
    assert_eq!(rows.len(), 46);
    for (row, p) in rows.iter().zip(&reference.points) {
        assert_eq!(row[0] as usize, p.step);
        assert_eq!(row[1..3], p.theta[..]);
        assert_eq!(row[3], p.loss);
    }

    ok(
        d,
        &[
            "--out",
            "diag",
            "toy-optim",
            "--landscape",
            "diag",
            "--theta0",
            "-1,2",
            "--optimizer",
            "gd",
            "--steps",
            "3",
        ],
    );
    let rows = trajectory_rows(&d.join("diag/trajectory.csv"));
    assert_eq!(rows[0][1..3], [-1.0, 2.0]);
    let diverged = gist(
        d,
        &[
            "--out",
            "x",
            "toy-optim",
            "--optimizer",
            "gd",
            "--lr",
            "1.0",
            "--steps",
            "2000",
        ],
    );
    assert_eq!(diverged.status.code(), Some(2));
}

#[test]
fn per_direction_lists_top_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--out", "toy", "gen-toy", "--kind", "nll"]);
    let base = [
        "--out",
        "pd",
        "per-direction",
        "--targets",
        "toy/targets.gist",
        "--candidates",
        "toy/candidates.gist",
    ];
    ok(d, &[&base[..], &["--direction", "1", "--m", "5"]].concat());
    let mut r = csv::Reader::from_path(d.join("pd/per_direction.csv")).unwrap();
    let scores: Vec<f64> = r
        .records()
        .map(|rec| rec.unwrap()[2].parse().unwrap())
        .collect();
    assert_eq!(scores.len(), 5);
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
    let out = gist(d, &[&base[..], &["--direction", "0"]].concat());
    assert_eq!(out.status.code(), Some(2));
    let out = gist(d, &[&base[..], &["--direction", "10"]].concat());
    assert_eq!(out.status.code(), Some(2));
}
