//! Projector → projected targets → pool scores → top-k, over in-memory matrices or feature files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::gradstore::{FeatureReader, GradientMatrix, PoolKind};
use crate::scoring::{
    score_pool, select_topk, ProjectedTargets, ScoreOptions, ScoreTable, SelectionResult,
};
use crate::spectral::{
    build_projector, build_projector_streamed, RankPolicy, SpectrumReport, TargetProjector,
};

/// Selection size, absolute or as a fraction of the candidate pool.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Count(usize),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, pool_size: usize) -> Result<usize> {
        match self {
            Budget::Count(k) => Ok(k),
            Budget::Fraction(f) if (0.0..=1.0).contains(&f) => {
                Ok((f * pool_size as f64).round() as usize)
            }
            Budget::Fraction(f) => Err(GistError::arg(format!(
                "budget fraction {f} outside [0, 1]"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineOptions {
    pub rank_policy: RankPolicy,
    pub scoring: ScoreOptions,
    pub chunk_rows: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            rank_policy: RankPolicy::default(),
            scoring: ScoreOptions::default(),
            chunk_rows: 4096,
        }
    }
}

impl PipelineOptions {
    fn validate(&self) -> Result<()> {
        if self.chunk_rows == 0 {
            return Err(GistError::arg("chunk_rows must be at least 1"));
        }
        self.rank_policy.validate()
    }
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub projector: TargetProjector,
    pub spectrum: SpectrumReport,
    pub table: ScoreTable,
    pub selection: SelectionResult,
}

pub fn select_in_memory(
    targets: &GradientMatrix,
    candidates: &GradientMatrix,
    budget: Budget,
    options: &PipelineOptions,
) -> Result<PipelineOutput> {
    options.validate()?;
    let (projector, spectrum) = build_projector(targets, &options.rank_policy)?;
    let projected = ProjectedTargets::from_gradients(&projector, targets)?;
    let chunks = candidates.chunks(options.chunk_rows)?;
    let table = score_pool(
        chunks.into_iter().map(Ok),
        &projected,
        &projector,
        &options.scoring,
    )?;
    let k = budget.resolve(table.n_candidates())?;
    let selection = select_topk(&table, k);
    Ok(PipelineOutput {
        projector,
        spectrum,
        table,
        selection,
    })
}

/// Builds the projector from a target feature file, streaming it twice in `chunk_rows` chunks.
pub fn projector_from_file(
    target_path: &Path,
    policy: &RankPolicy,
    chunk_rows: usize,
) -> Result<(TargetProjector, SpectrumReport)> {
    if chunk_rows == 0 {
        return Err(GistError::arg("chunk_rows must be at least 1"));
    }
    let reader = FeatureReader::open(target_path, PoolKind::Target)?;
    if reader.n_rows() == 0 {
        return Err(GistError::arg(format!(
            "target file {} is empty",
            target_path.display()
        )));
    }
    build_projector_streamed(
        || {
            let mut reader = FeatureReader::open(target_path, PoolKind::Target)?;
            let parts: Vec<Result<GradientMatrix>> = reader.chunks(chunk_rows)?.collect();
            Ok(parts.into_iter())
        },
        policy,
    )
}

/// Same as [`select_in_memory`], streaming both pools from feature files in `chunk_rows` chunks.
pub fn select_from_files(
    target_path: &Path,
    candidate_path: &Path,
    budget: Budget,
    options: &PipelineOptions,
) -> Result<PipelineOutput> {
    options.validate()?;
    let chunk = options.chunk_rows;
    let (projector, spectrum) = projector_from_file(target_path, &options.rank_policy, chunk)?;
    let targets = FeatureReader::open(target_path, PoolKind::Target)?.read(None)?;
    let projected = ProjectedTargets::from_gradients(&projector, &targets)?;
    let mut cand_reader = FeatureReader::open(candidate_path, PoolKind::Candidate)?;
    let n = cand_reader.n_rows();
    let table = score_pool(
        cand_reader.chunks(chunk)?,
        &projected,
        &projector,
        &options.scoring,
    )?;
    let k = budget.resolve(n)?;
    let selection = select_topk(&table, k);
    Ok(PipelineOutput {
        projector,
        spectrum,
        table,
        selection,
    })
}
