//! Subspace alignment scores, max-relevance aggregation and top-k selection.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::gradstore::GradientMatrix;
use crate::linalg::{dot, norm, Matrix};
use crate::spectral::TargetProjector;

/// Value a zero-projection entry takes in the binary pairwise export.
pub const SENTINEL_ENCODING: f32 = -2.0;

pub const TIE_BREAK_NOTE: &str = "ties broken by ascending candidate manifest index";

/// Cosine between two projected gradients, or the marker for a projection too small to
/// carry a direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Alignment {
    Score(f64),
    ZeroProjection,
}

impl Alignment {
    pub fn value(self) -> Option<f64> {
        match self {
            Alignment::Score(s) => Some(s),
            Alignment::ZeroProjection => None,
        }
    }

    pub fn is_sentinel(self) -> bool {
        self == Alignment::ZeroProjection
    }

    /// Total order in which the sentinel sits below every real score.
    pub fn rank_cmp(self, other: Self) -> Ordering {
        match (self, other) {
            (Alignment::Score(a), Alignment::Score(b)) => a.total_cmp(&b),
            (Alignment::Score(_), Alignment::ZeroProjection) => Ordering::Greater,
            (Alignment::ZeroProjection, Alignment::Score(_)) => Ordering::Less,
            (Alignment::ZeroProjection, Alignment::ZeroProjection) => Ordering::Equal,
        }
    }
}

impl Serialize for Alignment {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Alignment {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map_or(Alignment::ZeroProjection, Alignment::Score))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    /// Ablation only.
    Mean,
}

/// `1e-12 · sqrt(r)`.
pub fn default_zero_tolerance(rank: usize) -> f64 {
    1e-12 * (rank as f64).sqrt()
}

fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64, zero_tolerance: f64) -> Alignment {
    if norm_a <= zero_tolerance || norm_b <= zero_tolerance {
        return Alignment::ZeroProjection;
    }
    Alignment::Score((dot / (norm_a * norm_b)).clamp(-1.0, 1.0))
}

pub fn cosine_in_subspace(
    projected_a: &[f64],
    projected_b: &[f64],
    zero_tolerance: f64,
) -> Result<Alignment> {
    if projected_a.len() != projected_b.len() || projected_a.is_empty() {
        return Err(GistError::arg(format!(
            "projected vectors have lengths {} and {}",
            projected_a.len(),
            projected_b.len()
        )));
    }
    Ok(cosine_from_parts(
        dot(projected_a, projected_b),
        norm(projected_a),
        norm(projected_b),
        zero_tolerance,
    ))
}

/// Maximum over non-sentinel entries; all-sentinel rows give the sentinel.
pub fn aggregate_max(row: &[Alignment]) -> Result<Alignment> {
    aggregate(row, Aggregation::Max)
}

pub fn aggregate(row: &[Alignment], how: Aggregation) -> Result<Alignment> {
    if row.is_empty() {
        return Err(GistError::arg("cannot aggregate an empty score row"));
    }
    let values = row.iter().filter_map(|a| a.value());
    Ok(match how {
        Aggregation::Max => values
            .reduce(f64::max)
            .map_or(Alignment::ZeroProjection, Alignment::Score),
        Aggregation::Mean => {
            let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            if count == 0 {
                Alignment::ZeroProjection
            } else {
                Alignment::Score(sum / count as f64)
            }
        }
    })
}

/// Target gradients after projection, with their norms precomputed.
#[derive(Clone, Debug)]
pub struct ProjectedTargets {
    coords: Matrix,
    norms: Vec<f64>,
    ids: Vec<String>,
}

impl ProjectedTargets {
    pub fn new(coords: Matrix, ids: Vec<String>) -> Result<Self> {
        if coords.rows() == 0 {
            return Err(GistError::arg("target set is empty"));
        }
        if ids.len() != coords.rows() {
            return Err(GistError::arg(
                "target ids and projected rows disagree in count",
            ));
        }
        let norms = (0..coords.rows()).map(|i| norm(coords.row(i))).collect();
        Ok(Self { coords, norms, ids })
    }

    pub fn from_gradients(projector: &TargetProjector, targets: &GradientMatrix) -> Result<Self> {
        let coords = crate::spectral::project(projector, targets)?;
        Self::new(coords, targets.example_ids().to_vec())
    }

    pub fn len(&self) -> usize {
        self.coords.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rank(&self) -> usize {
        self.coords.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn coords(&self) -> &Matrix {
        &self.coords
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreOptions {
    pub aggregation: Aggregation,
    /// Defaults to `1e-12 · sqrt(r)`.
    pub zero_tolerance: Option<f64>,
    pub keep_pairwise: bool,
    /// 0 uses the ambient rayon pool.
    pub workers: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::Max,
            zero_tolerance: None,
            keep_pairwise: false,
            workers: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    /// Row-major `n_candidates × n_targets`, when requested.
    pub pairwise: Option<Vec<Alignment>>,
    pub final_scores: Vec<Alignment>,
    /// Index of the best-aligned target, first on ties.
    pub argmax_target: Vec<Option<usize>>,
    pub candidate_ids: Vec<String>,
    pub target_ids: Vec<String>,
    pub checkpoint_tag: String,
}

impl ScoreTable {
    pub fn n_candidates(&self) -> usize {
        self.final_scores.len()
    }

    pub fn pairwise_row(&self, i: usize) -> Option<&[Alignment]> {
        let t = self.target_ids.len();
        self.pairwise.as_ref().map(|p| &p[i * t..(i + 1) * t])
    }

    /// CSV with columns `candidate_id, final_score, argmax_target_id`; sentinels leave both
    /// value columns empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["candidate_id", "final_score", "argmax_target_id"])?;
        for i in 0..self.n_candidates() {
            let score = self.final_scores[i]
                .value()
                .map(|v| v.to_string())
                .unwrap_or_default();
            let arg = self.argmax_target[i]
                .map(|j| self.target_ids[j].as_str())
                .unwrap_or("");
            out.write_record([self.candidate_ids[i].as_str(), score.as_str(), arg])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Pairwise cosines as a feature-format matrix, one row per candidate.
    pub fn pairwise_matrix(&self) -> Result<GradientMatrix> {
        let p = self
            .pairwise
            .as_ref()
            .ok_or_else(|| GistError::arg("pairwise scores were not kept"))?;
        let data = p
            .iter()
            .map(|a| a.value().map_or(SENTINEL_ENCODING, |v| v as f32))
            .collect();
        GradientMatrix::new(
            data,
            self.target_ids.len(),
            self.candidate_ids.clone(),
            self.checkpoint_tag.clone(),
        )
    }
}

struct RowScores {
    pairwise: Vec<Alignment>,
    final_score: Alignment,
    argmax: Option<usize>,
}

fn score_row(
    row: &[f32],
    projector: &TargetProjector,
    targets: &ProjectedTargets,
    zero_tolerance: f64,
    how: Aggregation,
) -> RowScores {
    let coords = projector.project_row(row);
    let cand_norm = norm(&coords);
    let pairwise: Vec<Alignment> = (0..targets.len())
        .map(|j| {
            cosine_from_parts(
                dot(&coords, targets.coords.row(j)),
                cand_norm,
                targets.norms[j],
                zero_tolerance,
            )
        })
        .collect();
    let mut argmax: Option<usize> = None;
    for (j, a) in pairwise.iter().enumerate() {
        if a.is_sentinel() {
            continue;
        }
        if argmax.is_none_or(|b| a.rank_cmp(pairwise[b]) == Ordering::Greater) {
            argmax = Some(j);
        }
    }
    let final_score = match how {
        Aggregation::Max => argmax.map_or(Alignment::ZeroProjection, |j| pairwise[j]),
        Aggregation::Mean => {
            aggregate(&pairwise, Aggregation::Mean).unwrap_or(Alignment::ZeroProjection)
        }
    };
    RowScores {
        pairwise,
        final_score,
        argmax,
    }
}

pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| GistError::arg(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Scores every candidate against every projected target.
///
/// Each row is computed independently from the immutable projector and target block, so the
/// table is identical for any chunking and any worker count.
pub fn score_pool<I>(
    candidates: I,
    targets: &ProjectedTargets,
    projector: &TargetProjector,
    options: &ScoreOptions,
) -> Result<ScoreTable>
where
    I: IntoIterator<Item = Result<GradientMatrix>>,
    I::IntoIter: Send,
{
    if targets.is_empty() {
        return Err(GistError::arg("target set is empty"));
    }
    if targets.rank() != projector.rank() {
        return Err(GistError::arg(format!(
            "projected targets have rank {} but the projector has {}",
            targets.rank(),
            projector.rank()
        )));
    }
    let zero_tolerance = options
        .zero_tolerance
        .unwrap_or_else(|| default_zero_tolerance(projector.rank()));
    let how = options.aggregation;
    let keep = options.keep_pairwise;
    let iter = candidates.into_iter();
    with_workers(options.workers, move || {
        let mut table = ScoreTable {
            pairwise: keep.then(Vec::new),
            final_scores: Vec::new(),
            argmax_target: Vec::new(),
            candidate_ids: Vec::new(),
            target_ids: targets.ids.clone(),
            checkpoint_tag: projector.source_checkpoint().to_string(),
        };
        let mut seen = HashSet::new();
        for chunk in iter {
            let chunk = chunk?;
            if chunk.dim() != projector.dim() {
                return Err(GistError::arg(format!(
                    "candidate dim {} does not match projector dim {}",
                    chunk.dim(),
                    projector.dim()
                )));
            }
            for id in chunk.example_ids() {
                if !seen.insert(id.clone()) {
                    return Err(GistError::arg(format!("duplicate candidate id {id:?}")));
                }
            }
            let rows: Vec<RowScores> = (0..chunk.n_rows())
                .into_par_iter()
                .map(|i| score_row(chunk.row(i), projector, targets, zero_tolerance, how))
                .collect();
            for r in rows {
                if let Some(p) = table.pairwise.as_mut() {
                    p.extend(r.pairwise);
                }
                table.final_scores.push(r.final_score);
                table.argmax_target.push(r.argmax);
            }
            table
                .candidate_ids
                .extend(chunk.example_ids().iter().cloned());
        }
        Ok(table)
    })?
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ranked {
    score: Alignment,
    index: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    /// Greater means ranked earlier: higher score, then lower index.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .rank_cmp(other.score)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Bounded selection of the `k` best `(score, index)` pairs.
#[derive(Clone, Debug)]
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Reverse<Ranked>>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k.saturating_add(1).min(1 << 16)),
        }
    }

    pub fn push(&mut self, score: Alignment, index: usize) {
        if self.k == 0 {
            return;
        }
        let item = Ranked { score, index };
        if self.heap.len() < self.k {
            self.heap.push(Reverse(item));
        } else if self.heap.peek().is_some_and(|Reverse(worst)| item > *worst) {
            self.heap.pop();
            self.heap.push(Reverse(item));
        }
    }

    pub fn merge(&mut self, other: TopK) {
        for Reverse(item) in other.heap {
            self.push(item.score, item.index);
        }
    }

    /// Best first.
    pub fn into_sorted(self) -> Vec<(usize, Alignment)> {
        let mut items: Vec<Ranked> = self.heap.into_iter().map(|Reverse(r)| r).collect();
        items.sort_by(|a, b| b.cmp(a));
        items.into_iter().map(|r| (r.index, r.score)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedItem {
    pub id: String,
    pub score: Alignment,
    pub argmax_target: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    pub selected_ids: Vec<String>,
    pub scores: Vec<Alignment>,
    /// Manifest index of each selected candidate.
    pub indices: Vec<usize>,
    pub argmax_targets: Vec<Option<String>>,
    pub budget: usize,
    pub checkpoint_tag: String,
    pub tie_break_note: String,
}

#[derive(Serialize, Deserialize)]
struct SelectionFile {
    budget: usize,
    checkpoint_tag: String,
    selected: Vec<SelectedItem>,
}

impl SelectionResult {
    pub fn items(&self) -> Vec<SelectedItem> {
        (0..self.selected_ids.len())
            .map(|i| SelectedItem {
                id: self.selected_ids[i].clone(),
                score: self.scores[i],
                argmax_target: self.argmax_targets[i].clone(),
            })
            .collect()
    }

    /// `{budget, checkpoint_tag, selected: [{id, score, argmax_target}]}`.
    pub fn to_json(&self) -> Result<String> {
        let file = SelectionFile {
            budget: self.budget,
            checkpoint_tag: self.checkpoint_tag.clone(),
            selected: self.items(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

/// The `k` highest final scores, best first, ties by ascending manifest index.
pub fn select_topk(table: &ScoreTable, k: usize) -> SelectionResult {
    const PART: usize = 4096;
    let n = table.n_candidates();
    let partials: Vec<TopK> = table
        .final_scores
        .par_chunks(PART)
        .enumerate()
        .map(|(c, scores)| {
            let mut top = TopK::new(k);
            for (i, &s) in scores.iter().enumerate() {
                top.push(s, c * PART + i);
            }
            top
        })
        .collect();
    let mut top = TopK::new(k.min(n));
    for p in partials {
        top.merge(p);
    }
    let ranked = top.into_sorted();
    SelectionResult {
        selected_ids: ranked
            .iter()
            .map(|&(i, _)| table.candidate_ids[i].clone())
            .collect(),
        scores: ranked.iter().map(|&(_, s)| s).collect(),
        argmax_targets: ranked
            .iter()
            .map(|&(i, _)| table.argmax_target[i].map(|j| table.target_ids[j].clone()))
            .collect(),
        indices: ranked.iter().map(|&(i, _)| i).collect(),
        budget: k,
        checkpoint_tag: table.checkpoint_tag.clone(),
        tie_break_note: TIE_BREAK_NOTE.to_string(),
    }
}

/// Candidates ranked by `|⟨g, v_direction⟩| / ‖g‖` along one basis column (1-based index).
pub fn per_direction_top<I>(
    candidates: I,
    projector: &TargetProjector,
    direction_index: usize,
    m: usize,
) -> Result<Vec<(String, f64)>>
where
    I: IntoIterator<Item = Result<GradientMatrix>>,
{
    if direction_index == 0 || direction_index > projector.rank() {
        return Err(GistError::arg(format!(
            "direction {direction_index} outside 1..={}",
            projector.rank()
        )));
    }
    let v = projector.column(direction_index - 1);
    let mut top = TopK::new(m);
    let mut ids = Vec::new();
    for chunk in candidates {
        let chunk = chunk?;
        if chunk.dim() != projector.dim() {
            return Err(GistError::arg(format!(
                "candidate dim {} does not match projector dim {}",
                chunk.dim(),
                projector.dim()
            )));
        }
        for (row, id) in chunk.rows().zip(chunk.example_ids()) {
            let g: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
            let n = norm(&g);
            let score = if n > 0.0 {
                Alignment::Score(dot(&g, v).abs() / n)
            } else {
                Alignment::ZeroProjection
            };
            top.push(score, ids.len());
            ids.push(id.clone());
        }
    }
    Ok(top
        .into_sorted()
        .into_iter()
        .map(|(i, s)| (ids[i].clone(), s.value().unwrap_or(0.0)))
        .collect())
}
