//! The `gist` command line: argument parsing, config resolution and the subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use gist_core::gradstore::{save_features, FeatureReader, PoolKind};
use gist_core::oracle::quadratic::{OptimizerKind, TOY_START};
use gist_core::oracle::suites::{run_t1, run_t2, run_t3, toy_geometry, SuiteReport};
use gist_core::oracle::toydata::{generate_toy, ToyKind, ToySizes};
use gist_core::oracle::{run_trajectory, AdamConfig, LrSchedule, Optimizer, QuadraticLandscape};
use gist_core::pipeline::{projector_from_file, select_from_files, Budget, PipelineOptions};
use gist_core::scoring::{per_direction_top, ScoreOptions};
use gist_core::{Aggregation, RankPolicy};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";
pub const SPECTRUM_CSV: &str = "spectrum.csv";
pub const PROJECTOR_FILE: &str = "projector.gistproj";
pub const SELECTION_JSON: &str = "selection.json";
pub const SCORES_CSV: &str = "scores.csv";
pub const PAIRWISE_FILE: &str = "pairwise.gist";
pub const VERIFY_REPORT: &str = "verify_report.json";
pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const PER_DIRECTION_CSV: &str = "per_direction.csv";

/// Settings shared by every subcommand. Loaded from `--config`, then overridden by flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub target_features: Option<PathBuf>,
    pub candidate_features: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub rank_policy: RankPolicy,
    pub budget: Budget,
    pub chunk_rows: usize,
    pub workers: usize,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub keep_pairwise: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            target_features: None,
            candidate_features: None,
            output_dir: PathBuf::from("gist-out"),
            rank_policy: RankPolicy::default(),
            budget: Budget::Fraction(0.05),
            chunk_rows: 4096,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: 0,
            aggregation: Aggregation::Max,
            keep_pairwise: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_rows == 0 {
            bail!("chunk_rows must be at least 1");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        if let Budget::Fraction(f) = self.budget {
            if !(0.0..=1.0).contains(&f) {
                bail!("budget fraction {f} outside [0, 1]");
            }
        }
        self.rank_policy.validate()?;
        Ok(())
    }

    pub fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            rank_policy: self.rank_policy.clone(),
            scoring: ScoreOptions {
                aggregation: self.aggregation,
                zero_tolerance: None,
                keep_pairwise: self.keep_pairwise,
                workers: self.workers,
            },
            chunk_rows: self.chunk_rows,
        }
    }

    fn target_path(&self) -> Result<&Path> {
        self.target_features
            .as_deref()
            .context("no target feature file (use --targets or the config file)")
    }

    fn candidate_path(&self) -> Result<&Path> {
        self.candidate_features
            .as_deref()
            .context("no candidate feature file (use --candidates or the config file)")
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gist",
    version,
    about = "Spectral target-subspace data selection and its verification lab"
)]
pub struct Cli {
    /// JSON file mirroring the run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true)]
    pub chunk_rows: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Subcommand, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Write target and candidate gradient features drawn from an analytic toy model.
    GenToy(GenToyArgs),
    /// Singular spectrum of the target features and the rank the policy picks.
    Spectrum(SpectrumArgs),
    /// Score the candidate pool against the target subspace and select the top-k.
    Select(SelectArgs),
    /// Run the seeded verification suites.
    Verify(VerifyArgs),
    /// Optimizer trajectory on a 2-D toy quadratic.
    ToyOptim(ToyOptimArgs),
    /// Candidates most aligned with one principal target direction.
    PerDirection(PerDirectionArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKindArg {
    Quadratic,
    Lora,
    Nll,
}

impl From<ToyKindArg> for ToyKind {
    fn from(k: ToyKindArg) -> Self {
        match k {
            ToyKindArg::Quadratic => ToyKind::Quadratic,
            ToyKindArg::Lora => ToyKind::Lora,
            ToyKindArg::Nll => ToyKind::Nll,
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct GenToyArgs {
    #[arg(long, value_enum)]
    pub kind: ToyKindArg,
    /// Number of target rows (defaults per kind; nll uses 9).
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long)]
    pub candidates: Option<usize>,
}

#[derive(Clone, Debug, Default, Args, Serialize)]
pub struct PolicyArgs {
    #[arg(long)]
    pub variance_threshold: Option<f64>,
    #[arg(long)]
    pub fewshot_below: Option<usize>,
    #[arg(long)]
    pub max_rank: Option<usize>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationArg {
    Max,
    Mean,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Absolute budget.
    #[arg(long, conflicts_with = "fraction")]
    pub k: Option<usize>,
    /// Budget as a fraction of the candidate pool.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    /// Also write the full pairwise score matrix.
    #[arg(long)]
    pub keep_pairwise: bool,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem {
    T1,
    T2,
    T3,
    ToyGeometry,
    All,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub theorem: Theorem,
    /// Seeds per suite, starting at `--seed` (defaults: t1 200, t2 100, t3 20).
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Random Davis–Kahan perturbation trials in the t3 suite.
    #[arg(long, default_value_t = 500)]
    pub dk_trials: usize,
    /// Add a t3 instance with a zero eigengap, which must be reported as skipped.
    #[arg(long)]
    pub inject_degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LandscapeArg {
    Diag,
    Coupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerArg {
    Newton,
    Adam,
    Gd,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ToyOptimArgs {
    #[arg(long, value_enum, default_value = "coupled")]
    pub landscape: LandscapeArg,
    #[arg(long, value_enum, default_value = "adam")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 45)]
    pub steps: usize,
    /// Learning rate (Adam: initial rate; defaults newton 1, adam 0.25, gd 0.05).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Keep Adam's learning rate constant instead of decaying it linearly over `--steps`.
    #[arg(long)]
    pub constant_lr: bool,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub epsilon: f64,
    /// Start point, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta0: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct PerDirectionArgs {
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// 1-based principal direction.
    #[arg(long)]
    pub direction: usize,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    #[command(flatten)]
    pub policy: PolicyArgs,
}

/// How a run ended when it did not hit an error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// A verification ran to completion and found failures.
    Failed(String),
}

#[derive(Serialize)]
struct ResolvedRun<'a> {
    command: &'a Command,
    #[serde(flatten)]
    config: &'a RunConfig,
}

fn apply_policy(policy: &mut RankPolicy, args: &PolicyArgs) {
    if let Some(t) = args.variance_threshold {
        policy.variance_threshold = t;
    }
    if let Some(n) = args.fewshot_below {
        policy.fewshot_full_rank_below = n;
    }
    if let Some(r) = args.max_rank {
        policy.max_rank = Some(r);
    }
}

/// Defaults, then the config file, then global flags, then subcommand flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(c) = cli.chunk_rows {
        cfg.chunk_rows = c;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    match &cli.command {
        Command::Spectrum(a) => {
            if let Some(t) = &a.targets {
                cfg.target_features = Some(t.clone());
            }
            apply_policy(&mut cfg.rank_policy, &a.policy);
        }
        Command::Select(a) => {
            if let Some(t) = &a.targets {
                cfg.target_features = Some(t.clone());
            }
            if let Some(c) = &a.candidates {
                cfg.candidate_features = Some(c.clone());
            }
            if let Some(k) = a.k {
                cfg.budget = Budget::Count(k);
            }
            if let Some(f) = a.fraction {
                cfg.budget = Budget::Fraction(f);
            }
            match a.aggregation {
                Some(AggregationArg::Max) => cfg.aggregation = Aggregation::Max,
                Some(AggregationArg::Mean) => cfg.aggregation = Aggregation::Mean,
                None => {}
            }
            cfg.keep_pairwise |= a.keep_pairwise;
            apply_policy(&mut cfg.rank_policy, &a.policy);
        }
        Command::PerDirection(a) => {
            if let Some(t) = &a.targets {
                cfg.target_features = Some(t.clone());
            }
            if let Some(c) = &a.candidates {
                cfg.candidate_features = Some(c.clone());
            }
            apply_policy(&mut cfg.rank_policy, &a.policy);
        }
        Command::GenToy(_) | Command::Verify(_) | Command::ToyOptim(_) => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = resolve_config(cli)?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    write_json(
        &out.join(RESOLVED_CONFIG_FILE),
        &ResolvedRun {
            command: &cli.command,
            config: &cfg,
        },
    )?;
    match &cli.command {
        Command::GenToy(a) => cmd_gen_toy(&cfg, a),
        Command::Spectrum(_) => cmd_spectrum(&cfg),
        Command::Select(_) => cmd_select(&cfg),
        Command::Verify(a) => cmd_verify(&cfg, a),
        Command::ToyOptim(a) => cmd_toy_optim(&cfg, a),
        Command::PerDirection(a) => cmd_per_direction(&cfg, a),
    }
}

pub fn cmd_gen_toy(cfg: &RunConfig, args: &GenToyArgs) -> Result<Outcome> {
    let kind = ToyKind::from(args.kind);
    let defaults = kind.default_sizes();
    let sizes = ToySizes {
        targets: args.targets.unwrap_or(defaults.targets),
        candidates: args.candidates.unwrap_or(defaults.candidates),
    };
    let data = generate_toy(kind, cfg.seed, sizes).context("generating toy pool")?;
    let paths = data.write(&cfg.output_dir).context("writing toy pool")?;
    eprintln!(
        "{kind}: {} targets, {} candidates, dim {} -> {}",
        data.targets.n_rows(),
        data.candidates.n_rows(),
        data.targets.dim(),
        paths.targets.parent().unwrap_or(Path::new(".")).display()
    );
    Ok(Outcome::Success)
}

pub fn cmd_spectrum(cfg: &RunConfig) -> Result<Outcome> {
    let path = cfg.target_path()?;
    let (projector, spectrum) = projector_from_file(path, &cfg.rank_policy, cfg.chunk_rows)
        .with_context(|| format!("building projector from {}", path.display()))?;
    let mut w = create(&cfg.output_dir.join(SPECTRUM_CSV))?;
    spectrum.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&cfg.output_dir.join(PROJECTOR_FILE))?;
    projector.write_to(&mut w)?;
    w.flush()?;
    eprintln!("{}, r={}", spectrum.branch, spectrum.chosen_rank);
    if spectrum.degenerate_gap {
        eprintln!(
            "warning: eigengap at r={} is degenerate",
            spectrum.chosen_rank
        );
    }
    Ok(Outcome::Success)
}

pub fn cmd_select(cfg: &RunConfig) -> Result<Outcome> {
    let (targets, candidates) = (cfg.target_path()?, cfg.candidate_path()?);
    let output = select_from_files(targets, candidates, cfg.budget, &cfg.pipeline_options())
        .context("running the selection pipeline")?;
    let dir = &cfg.output_dir;
    let mut w = create(&dir.join(SELECTION_JSON))?;
    w.write_all(output.selection.to_json()?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    let mut w = create(&dir.join(SCORES_CSV))?;
    output.table.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join(SPECTRUM_CSV))?;
    output.spectrum.write_csv(&mut w)?;
    w.flush()?;
    if cfg.keep_pairwise {
        save_features(&output.table.pairwise_matrix()?, &dir.join(PAIRWISE_FILE))?;
    }
    eprintln!(
        "{}, r={}; selected {} of {}",
        output.spectrum.branch,
        output.spectrum.chosen_rank,
        output.selection.selected_ids.len(),
        output.table.n_candidates()
    );
    Ok(Outcome::Success)
}

pub fn cmd_verify(cfg: &RunConfig, args: &VerifyArgs) -> Result<Outcome> {
    let seeds = |default: u64| -> Vec<u64> {
        let n = args.seeds.unwrap_or(default);
        (cfg.seed..cfg.seed + n).collect()
    };
    let suites: Vec<SuiteReport> = match args.theorem {
        Theorem::T1 => vec![run_t1(&seeds(200))],
        Theorem::T2 => vec![run_t2(&seeds(100))],
        Theorem::T3 => vec![run_t3(&seeds(20), args.dk_trials, args.inject_degenerate)],
        Theorem::ToyGeometry => vec![toy_geometry()],
        Theorem::All => vec![
            toy_geometry(),
            run_t1(&seeds(200)),
            run_t2(&seeds(100)),
            run_t3(&seeds(20), args.dk_trials, args.inject_degenerate),
        ],
    };
    let passed = suites.iter().all(SuiteReport::passed);
    #[derive(Serialize)]
    struct Report<'a> {
        passed: bool,
        suites: &'a [SuiteReport],
    }
    write_json(
        &cfg.output_dir.join(VERIFY_REPORT),
        &Report {
            passed,
            suites: &suites,
        },
    )?;
    let mut failures = Vec::new();
    for s in &suites {
        let margin = s
            .worst_margin
            .map_or("n/a".to_string(), |m| format!("{m:.3e}"));
        eprintln!(
            "{}: {} passed, {} skipped, {} failed (worst margin {margin})",
            s.theorem, s.pass_count, s.skip_count, s.fail_count
        );
        if !s.passed() {
            failures.push(format!(
                "{} failed on seeds {:?}",
                s.theorem, s.failing_seeds
            ));
        }
    }
    Ok(if failures.is_empty() {
        Outcome::Success
    } else {
        Outcome::Failed(failures.join("; "))
    })
}

/// Optimizer for `toy-optim`, with the toy defaults filled in.
pub fn toy_optimizer(args: &ToyOptimArgs) -> Optimizer {
    match args.optimizer {
        OptimizerArg::Newton => Optimizer::Newton {
            lr: args.lr.unwrap_or(1.0),
        },
        OptimizerArg::Gd => Optimizer::Gd {
            lr: args.lr.unwrap_or(Optimizer::DEFAULT_GD_LR),
        },
        OptimizerArg::Adam => {
            let base = AdamConfig::default();
            Optimizer::Adam(AdamConfig {
                beta1: args.beta1,
                beta2: args.beta2,
                epsilon: args.epsilon,
                base_lr: args.lr.unwrap_or(base.base_lr),
                schedule: if args.constant_lr {
                    LrSchedule::Constant
                } else {
                    LrSchedule::LinearDecay {
                        total_steps: args.steps,
                    }
                },
            })
        }
    }
}

pub fn cmd_toy_optim(cfg: &RunConfig, args: &ToyOptimArgs) -> Result<Outcome> {
    let landscape = match args.landscape {
        LandscapeArg::Diag => QuadraticLandscape::axis_aligned(),
        LandscapeArg::Coupled => QuadraticLandscape::coupled(),
    };
    let theta0 = args.theta0.clone().unwrap_or_else(|| TOY_START.to_vec());
    let optimizer = toy_optimizer(args);
    let trajectory = run_trajectory(&landscape, &optimizer, &theta0, args.steps)?;
    let mut w = create(&cfg.output_dir.join(TRAJECTORY_CSV))?;
    trajectory.write_csv(&mut w)?;
    w.flush()?;
    let kind: OptimizerKind = optimizer.kind();
    eprintln!(
        "{kind}: {} steps, final loss {:e}",
        args.steps,
        trajectory.final_loss()
    );
    Ok(Outcome::Success)
}

pub fn cmd_per_direction(cfg: &RunConfig, args: &PerDirectionArgs) -> Result<Outcome> {
    let (targets, candidates) = (cfg.target_path()?, cfg.candidate_path()?);
    let (projector, _) = projector_from_file(targets, &cfg.rank_policy, cfg.chunk_rows)?;
    let mut reader = FeatureReader::open(candidates, PoolKind::Candidate)?;
    let top = per_direction_top(
        reader.chunks(cfg.chunk_rows)?,
        &projector,
        args.direction,
        args.m,
    )?;
    let mut w = csv::Writer::from_writer(create(&cfg.output_dir.join(PER_DIRECTION_CSV))?);
    w.write_record(["rank", "candidate_id", "score"])?;
    for (i, (id, score)) in top.iter().enumerate() {
        w.write_record([(i + 1).to_string(), id.clone(), score.to_string()])?;
    }
    w.flush()?;
    eprintln!(
        "direction {} of {}: {} candidates",
        args.direction,
        projector.rank(),
        top.len()
    );
    Ok(Outcome::Success)
}
