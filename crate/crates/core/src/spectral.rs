//! Target subspace recovery.
//!
//! The right singular vectors of the `n × d` target gradient matrix `G` (`n ≪ d`) are
//! recovered from the `n × n` Gram matrix `G Gᵀ = U Σ² Uᵀ` as `V = Gᵀ U Σ⁻¹`, so nothing of
//! size `d × d` is ever formed. The rank is picked from the explained-variance curve, with a
//! full-rank override for very small target sets.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GistError, Result};
use crate::gradstore::GradientMatrix;
use crate::linalg::{self, dot, Matrix};

/// Largest target pool for which the `n × n` Gram matrix is formed.
pub const MAX_ROW_GRAM: usize = 8192;
/// Largest dim for which the `d × d` Fisher proxy is formed.
pub const MAX_COL_GRAM: usize = 4096;
/// Singular values at or below this fraction of `σ₁` count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Relative gap `(σ_r − σ_{r+1}) / σ_r` below which the chosen rank is flagged.
pub const DEGENERATE_GAP_REL: f64 = 1e-6;
/// Default relative eigengap tolerance of the Davis–Kahan check.
pub const DK_GAP_TOLERANCE_REL: f64 = 1e-6;

pub const PROJECTOR_MAGIC: &[u8; 8] = b"GISTPROJ";
pub const PROJECTOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramMode {
    /// `G Gᵀ`, `n × n`.
    Row,
    /// `(1/n) Gᵀ G`, `d × d`: the empirical Fisher proxy. Toy scale only.
    Col,
}

/// Exact Gram matrix of a chunked pool, accumulated in `f64`.
///
/// Every entry is a single in-order dot product (row mode) or an in-order sum over rows
/// (column mode), so the result does not depend on how the pool was chunked.
pub fn accumulate_gram<I>(chunks: I, mode: GramMode) -> Result<Matrix>
where
    I: IntoIterator<Item = Result<GradientMatrix>>,
{
    match mode {
        GramMode::Row => {
            let rows = collect_rows(chunks, MAX_ROW_GRAM)?;
            Ok(row_gram(&rows))
        }
        GramMode::Col => {
            let mut acc: Option<Matrix> = None;
            let mut n = 0usize;
            let mut dim = None;
            for chunk in chunks {
                let chunk = chunk?;
                check_dim(&mut dim, chunk.dim())?;
                if chunk.dim() > MAX_COL_GRAM {
                    return Err(GistError::Capacity(format!(
                        "d = {} exceeds the {MAX_COL_GRAM} limit for a d × d Gram",
                        chunk.dim()
                    )));
                }
                let d = chunk.dim();
                let m = acc.get_or_insert_with(|| Matrix::zeros(d, d));
                for row in chunk.rows() {
                    let g: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
                    for i in 0..d {
                        if g[i] == 0.0 {
                            continue;
                        }
                        for (o, gj) in m.row_mut(i).iter_mut().zip(&g) {
                            *o += g[i] * gj;
                        }
                    }
                    n += 1;
                }
            }
            match acc {
                Some(m) if n > 0 => Ok(m.scale(1.0 / n as f64).symmetrized()),
                _ => Err(GistError::arg("cannot form a Gram matrix of an empty pool")),
            }
        }
    }
}

fn check_dim(dim: &mut Option<usize>, d: usize) -> Result<()> {
    match *dim {
        Some(expected) if expected != d => Err(GistError::arg(format!(
            "chunk dim {d} differs from {expected}"
        ))),
        _ => {
            *dim = Some(d);
            Ok(())
        }
    }
}

fn collect_rows<I>(chunks: I, limit: usize) -> Result<Vec<Vec<f64>>>
where
    I: IntoIterator<Item = Result<GradientMatrix>>,
{
    let mut rows = Vec::new();
    let mut dim = None;
    for chunk in chunks {
        let chunk = chunk?;
        check_dim(&mut dim, chunk.dim())?;
        if rows.len() + chunk.n_rows() > limit {
            return Err(GistError::Capacity(format!(
                "more than {limit} rows; the n × n Gram would not fit"
            )));
        }
        rows.extend(
            chunk
                .rows()
                .map(|r| r.iter().map(|&x| f64::from(x)).collect::<Vec<f64>>()),
        );
    }
    if rows.is_empty() {
        return Err(GistError::arg("cannot form a Gram matrix of an empty pool"));
    }
    Ok(rows)
}

fn row_gram(rows: &[Vec<f64>]) -> Matrix {
    let n = rows.len();
    let lower: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..=i).map(|j| dot(&rows[i], &rows[j])).collect())
        .collect();
    let mut m = Matrix::zeros(n, n);
    for (i, row) in lower.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankPolicy {
    pub variance_threshold: f64,
    pub fewshot_full_rank_below: usize,
    pub max_rank: Option<usize>,
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self {
            variance_threshold: 0.95,
            fewshot_full_rank_below: 16,
            max_rank: None,
        }
    }
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance_threshold > 0.0 && self.variance_threshold <= 1.0) {
            return Err(GistError::arg(format!(
                "variance_threshold {} outside (0, 1]",
                self.variance_threshold
            )));
        }
        if self.max_rank == Some(0) {
            return Err(GistError::arg("max_rank must be at least 1"));
        }
        Ok(())
    }

    /// Rank for a spectrum of `n_targets` rows with the given cumulative variance curve.
    pub fn choose(
        &self,
        n_targets: usize,
        cumulative: &[f64],
        numerical_rank: usize,
    ) -> (usize, RankBranch) {
        let (mut r, mut branch) = if n_targets < self.fewshot_full_rank_below {
            (numerical_rank, RankBranch::FewShotOverride)
        } else {
            // Tolerate rounding in the last partial sum so a threshold of 1.0 is reachable.
            let hit = cumulative
                .iter()
                .position(|&c| c >= self.variance_threshold - 1e-12)
                .map_or(numerical_rank, |i| i + 1);
            (hit.min(numerical_rank), RankBranch::VarianceThreshold)
        };
        if let Some(cap) = self.max_rank {
            if r > cap {
                r = cap;
                branch = RankBranch::MaxRankCap;
            }
        }
        (r.max(1), branch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBranch {
    FewShotOverride,
    VarianceThreshold,
    MaxRankCap,
}

impl std::fmt::Display for RankBranch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RankBranch::FewShotOverride => "few-shot override",
            RankBranch::VarianceThreshold => "variance threshold",
            RankBranch::MaxRankCap => "max-rank cap",
        })
    }
}

/// Singular spectrum of the target matrix and the rank decision taken on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// All `n` singular values, descending.
    pub singular_values: Vec<f64>,
    /// `c_r = Σ_{i≤r} σ_i² / Σ_i σ_i²`.
    pub explained_variance: Vec<f64>,
    /// `γ_r = σ_r² − σ_{r+1}²`, with `σ_{n+1} = 0`.
    pub gaps: Vec<f64>,
    pub numerical_rank: usize,
    pub chosen_rank: usize,
    pub branch: RankBranch,
    /// Set when `σ_r` and `σ_{r+1}` are within a relative `1e-6` at the chosen rank.
    pub degenerate_gap: bool,
}

impl SpectrumReport {
    pub fn from_singular_values(
        singular_values: Vec<f64>,
        n_targets: usize,
        policy: &RankPolicy,
        tolerance: f64,
    ) -> Result<Self> {
        let sigma1 = singular_values.first().copied().unwrap_or(0.0);
        if !(sigma1 > 0.0) {
            return Err(GistError::DegenerateSubspace(
                "target gradients are all zero".into(),
            ));
        }
        let squares: Vec<f64> = singular_values.iter().map(|s| s * s).collect();
        let mut prefix = Vec::with_capacity(squares.len());
        let mut acc = 0.0;
        for s in &squares {
            acc += s;
            prefix.push(acc);
        }
        let total = acc;
        let explained_variance: Vec<f64> = prefix.iter().map(|p| p / total).collect();
        let gaps = (0..squares.len())
            .map(|i| squares[i] - squares.get(i + 1).copied().unwrap_or(0.0))
            .collect();
        let numerical_rank = singular_values
            .iter()
            .filter(|&&s| s > tolerance * sigma1)
            .count();
        let (chosen_rank, branch) = policy.choose(n_targets, &explained_variance, numerical_rank);
        let next = singular_values.get(chosen_rank).copied().unwrap_or(0.0);
        let at = singular_values[chosen_rank - 1];
        let degenerate_gap =
            chosen_rank < singular_values.len() && (at - next) < DEGENERATE_GAP_REL * at;
        Ok(Self {
            singular_values,
            explained_variance,
            gaps,
            numerical_rank,
            chosen_rank,
            branch,
            degenerate_gap,
        })
    }

    /// CSV with columns `index, sigma, cumulative_variance, gap` (1-based index).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["index", "sigma", "cumulative_variance", "gap"])?;
        for i in 0..self.singular_values.len() {
            out.write_record(&[
                (i + 1).to_string(),
                self.singular_values[i].to_string(),
                self.explained_variance[i].to_string(),
                self.gaps[i].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Orthonormal basis `V_r` of the target subspace; `Π = V_rᵀ`, `P_r = V_r V_rᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetProjector {
    columns: Vec<Vec<f64>>,
    dim: usize,
    singular_values: Vec<f64>,
    source_checkpoint: String,
}

impl TargetProjector {
    /// Wraps precomputed columns; checks orthonormality to `1e-6`.
    pub fn from_columns(
        columns: Vec<Vec<f64>>,
        singular_values: Vec<f64>,
        source_checkpoint: impl Into<String>,
    ) -> Result<Self> {
        let dim = columns
            .first()
            .map(Vec::len)
            .ok_or_else(|| GistError::arg("empty basis"))?;
        if columns.iter().any(|c| c.len() != dim) || singular_values.len() != columns.len() {
            return Err(GistError::arg(
                "basis columns and singular values disagree in shape",
            ));
        }
        let p = Self {
            columns,
            dim,
            singular_values,
            source_checkpoint: source_checkpoint.into(),
        };
        let defect = linalg::orthonormality_defect(&p.basis());
        if defect > 1e-6 {
            return Err(GistError::arg(format!(
                "basis is not orthonormal (defect {defect:e})"
            )));
        }
        Ok(p)
    }

    pub fn rank(&self) -> usize {
        self.columns.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn source_checkpoint(&self) -> &str {
        &self.source_checkpoint
    }

    pub fn column(&self, c: usize) -> &[f64] {
        &self.columns[c]
    }

    /// `V_r` as a `d × r` matrix.
    pub fn basis(&self) -> Matrix {
        Matrix::from_fn(self.dim, self.rank(), |i, j| self.columns[j][i])
    }

    /// `P_r = V_r V_rᵀ`; `d × d`, so toy scale only.
    pub fn projection_matrix(&self) -> Matrix {
        let b = self.basis();
        b.matmul(&b.transpose())
    }

    /// `Π g` for one stored row.
    pub fn project_row(&self, row: &[f32]) -> Vec<f64> {
        debug_assert_eq!(row.len(), self.dim);
        self.columns
            .iter()
            .map(|c| c.iter().zip(row).map(|(v, &g)| v * f64::from(g)).sum())
            .collect()
    }

    pub fn project_row_f64(&self, row: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|c| dot(c, row)).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PROJECTOR_MAGIC)?;
        w.write_all(&PROJECTOR_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        w.write_all(&(self.source_checkpoint.len() as u32).to_le_bytes())?;
        w.write_all(self.source_checkpoint.as_bytes())?;
        for s in &self.singular_values {
            w.write_all(&s.to_le_bytes())?;
        }
        for col in &self.columns {
            for &v in col {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a projector artifact. The basis comes back at `f32` precision.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let fmt = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => {
                GistError::Corruption("projector file truncated".into())
            }
            _ => GistError::Io(e),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != PROJECTOR_MAGIC {
            return Err(GistError::Format(format!("bad projector magic {magic:?}")));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(fmt)?;
        let version = u32::from_le_bytes(b4);
        if version != PROJECTOR_VERSION {
            return Err(GistError::Format(format!(
                "unsupported projector version {version}"
            )));
        }
        r.read_exact(&mut b8).map_err(fmt)?;
        let dim = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(fmt)?;
        let rank = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b4).map_err(fmt)?;
        let tag_len = u32::from_le_bytes(b4) as usize;
        if dim == 0 || rank == 0 || rank > dim || tag_len > 1 << 20 {
            return Err(GistError::Format(format!(
                "implausible projector shape d={dim} r={rank}"
            )));
        }
        let mut tag = vec![0u8; tag_len];
        r.read_exact(&mut tag).map_err(fmt)?;
        let tag =
            String::from_utf8(tag).map_err(|_| GistError::Format("tag is not UTF-8".into()))?;
        let mut singular_values = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut b8).map_err(fmt)?;
            singular_values.push(f64::from_le_bytes(b8));
        }
        let mut columns = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut col = Vec::with_capacity(dim);
            for _ in 0..dim {
                r.read_exact(&mut b4).map_err(fmt)?;
                col.push(f64::from(f32::from_le_bytes(b4)));
            }
            columns.push(col);
        }
        Ok(Self {
            columns,
            dim,
            singular_values,
            source_checkpoint: tag,
        })
    }
}

/// Floor on `σ_i / σ₁` below which the Gram route cannot resolve a singular value.
///
/// Eigenvalues of `G Gᵀ` carry an absolute error of order `n ε σ₁²`, so singular values
/// under `sqrt(n ε) σ₁` are indistinguishable from zero whatever the nominal tolerance.
pub fn gram_rank_tolerance(n: usize) -> f64 {
    RANK_TOLERANCE.max((64.0 * n as f64 * f64::EPSILON).sqrt())
}

/// Projector from an in-memory target matrix.
pub fn build_projector(
    targets: &GradientMatrix,
    policy: &RankPolicy,
) -> Result<(TargetProjector, SpectrumReport)> {
    build_projector_streamed(|| Ok(std::iter::once(Ok(targets.clone()))), policy)
}

/// Projector from a re-openable chunk stream over the targets.
///
/// The stream is read twice: once for the Gram matrix and once to form the basis columns.
pub fn build_projector_streamed<F, I>(
    mut open: F,
    policy: &RankPolicy,
) -> Result<(TargetProjector, SpectrumReport)>
where
    F: FnMut() -> Result<I>,
    I: Iterator<Item = Result<GradientMatrix>>,
{
    policy.validate()?;
    let mut checkpoint = String::new();
    let mut first = true;
    let tagged = open()?.inspect(|c| {
        if let Ok(m) = c {
            if first {
                checkpoint = m.checkpoint_tag().to_string();
                first = false;
            }
        }
    });
    let gram = accumulate_gram(tagged, GramMode::Row)?;
    let n = gram.rows();

    let eig = linalg::symmetric_eigen(&gram);
    let singular_values: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let report =
        SpectrumReport::from_singular_values(singular_values, n, policy, gram_rank_tolerance(n))?;
    let r = report.chosen_rank;

    // V_r = Gᵀ U_r Σ_r⁻¹, accumulated over rows in file order.
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut i = 0usize;
    for chunk in open()? {
        let chunk = chunk?;
        if columns.is_empty() {
            columns = vec![vec![0.0; chunk.dim()]; r];
        }
        for row in chunk.rows() {
            if i >= n {
                return Err(GistError::arg("target stream changed between passes"));
            }
            for (c, col) in columns.iter_mut().enumerate() {
                let w = eig.vectors[(i, c)];
                for (v, &g) in col.iter_mut().zip(row) {
                    *v += w * f64::from(g);
                }
            }
            i += 1;
        }
    }
    if i != n {
        return Err(GistError::arg("target stream changed between passes"));
    }
    for (col, &s) in columns.iter_mut().zip(&report.singular_values) {
        for v in col.iter_mut() {
            *v /= s;
        }
    }
    reorthonormalize(&mut columns)?;
    for col in columns.iter_mut() {
        apply_sign_convention(col);
    }
    let projector = TargetProjector {
        dim: columns[0].len(),
        columns,
        singular_values: report.singular_values[..r].to_vec(),
        source_checkpoint: checkpoint,
    };
    Ok((projector, report))
}

/// Two passes of modified Gram–Schmidt in column order.
///
/// `Gᵀ U Σ⁻¹` loses orthogonality like `ε κ²`; this restores it without moving
/// well-conditioned columns beyond rounding.
fn reorthonormalize(columns: &mut [Vec<f64>]) -> Result<()> {
    for _ in 0..2 {
        for c in 0..columns.len() {
            let (done, rest) = columns.split_at_mut(c);
            let col = &mut rest[0];
            for prev in done.iter() {
                let p = dot(prev, col);
                for (x, y) in col.iter_mut().zip(prev) {
                    *x -= p * y;
                }
            }
            let nrm = linalg::norm(col);
            if !(nrm > 0.5) {
                return Err(GistError::DegenerateSubspace(format!(
                    "basis column {c} collapsed during re-orthonormalization"
                )));
            }
            for x in col.iter_mut() {
                *x /= nrm;
            }
        }
    }
    Ok(())
}

/// Flip the column so its largest-magnitude entry (first on ties) is nonnegative.
pub fn apply_sign_convention(col: &mut [f64]) {
    let mut best = 0usize;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() {
            best = i;
        }
    }
    if col.get(best).is_some_and(|&v| v < 0.0) {
        for v in col.iter_mut() {
            *v = -*v;
        }
    }
}

/// `Π g` for every row.
pub fn project(projector: &TargetProjector, vectors: &GradientMatrix) -> Result<Matrix> {
    if vectors.dim() != projector.dim() {
        return Err(GistError::arg(format!(
            "vectors have dim {} but the projector expects {}",
            vectors.dim(),
            projector.dim()
        )));
    }
    let r = projector.rank();
    let mut out = Matrix::zeros(vectors.n_rows(), r);
    for (i, row) in vectors.rows().enumerate() {
        out.row_mut(i).copy_from_slice(&projector.project_row(row));
    }
    Ok(out)
}

/// `‖G − G P_r‖_F²`.
pub fn reconstruction_error(projector: &TargetProjector, targets: &GradientMatrix) -> Result<f64> {
    if targets.dim() != projector.dim() {
        return Err(GistError::arg(format!(
            "targets have dim {} but the projector expects {}",
            targets.dim(),
            projector.dim()
        )));
    }
    let mut total = 0.0;
    for row in targets.rows() {
        let coords = projector.project_row(row);
        for (k, &x) in row.iter().enumerate() {
            let recon: f64 = coords
                .iter()
                .enumerate()
                .map(|(c, p)| p * projector.columns[c][k])
                .sum();
            let e = f64::from(x) - recon;
            total += e * e;
        }
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubspaceDistance {
    /// Ascending, in `[0, π/2]`.
    pub principal_angles: Vec<f64>,
    pub sin_theta_max: f64,
}

/// Principal angles between the column spans of two orthonormal `d × r` bases.
///
/// Cosines are the singular values of `AᵀB` and sines those of `B − A AᵀB`; each angle is
/// taken from whichever of the two is better conditioned (arcsin below π/4, arccos above),
/// which keeps angles near zero accurate to rounding instead of `sqrt(ε)`.
pub fn principal_angles(basis_a: &Matrix, basis_b: &Matrix) -> Result<SubspaceDistance> {
    if basis_a.rows() != basis_b.rows() || basis_a.cols() != basis_b.cols() {
        return Err(GistError::arg(format!(
            "bases have shapes {}x{} and {}x{}",
            basis_a.rows(),
            basis_a.cols(),
            basis_b.rows(),
            basis_b.cols()
        )));
    }
    if basis_a.cols() == 0 {
        return Err(GistError::arg("bases must have at least one column"));
    }
    for (name, b) in [("first", basis_a), ("second", basis_b)] {
        let defect = linalg::orthonormality_defect(b);
        if defect > 1e-6 {
            return Err(GistError::arg(format!(
                "{name} basis is not orthonormal (defect {defect:e})"
            )));
        }
    }
    let r = basis_a.cols();
    let cross = basis_a.transpose().matmul(basis_b);
    let cosines = linalg::singular_values(&cross);
    let residual = basis_b.sub(&basis_a.matmul(&cross));
    let mut sines = linalg::singular_values(&residual);
    sines.reverse();

    let angles: Vec<f64> = (0..r)
        .map(|i| {
            let c = cosines[i].clamp(0.0, 1.0);
            let s = sines[i].clamp(0.0, 1.0);
            if c * c >= 0.5 {
                s.asin()
            } else {
                c.acos()
            }
        })
        .collect();
    let mut angles = angles;
    angles.sort_by(f64::total_cmp);
    let sin_theta_max = angles.last().map_or(0.0, |a| a.sin()).clamp(0.0, 1.0);
    Ok(SubspaceDistance {
        principal_angles: angles,
        sin_theta_max,
    })
}

/// Top-`r` eigenvectors and all eigenvalues (descending) of a symmetric matrix.
pub fn top_eigenspace(m: &Matrix, r: usize) -> Result<(Matrix, Vec<f64>)> {
    if !m.is_square() || r == 0 || r > m.rows() {
        return Err(GistError::arg(format!(
            "rank {r} invalid for a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let eig = linalg::symmetric_eigen(m);
    Ok((eig.top(r), eig.values))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DavisKahanCheck {
    /// `‖sin Θ(S_r(A), S_r(B))‖₂`.
    pub lhs: f64,
    /// `‖A − B‖₂ / γ_r(B)`.
    pub rhs: f64,
    pub holds: bool,
    pub perturbation_norm: f64,
    pub gap: f64,
}

/// Both sides of `‖sin Θ(S_r(A), S_r(B))‖₂ ≤ ‖A − B‖₂ / (λ_r(B) − λ_{r+1}(B))`.
pub fn davis_kahan_bound_check(
    matrix_a: &Matrix,
    matrix_b: &Matrix,
    r: usize,
) -> Result<DavisKahanCheck> {
    davis_kahan_bound_check_with_tol(matrix_a, matrix_b, r, DK_GAP_TOLERANCE_REL)
}

/// As [`davis_kahan_bound_check`], refusing gaps at or below `gap_tol_rel · max|λ(B)|`.
pub fn davis_kahan_bound_check_with_tol(
    matrix_a: &Matrix,
    matrix_b: &Matrix,
    r: usize,
    gap_tol_rel: f64,
) -> Result<DavisKahanCheck> {
    if !matrix_a.is_square() || matrix_a.rows() != matrix_b.rows() || !matrix_b.is_square() {
        return Err(GistError::arg(
            "Davis–Kahan needs two square matrices of equal size",
        ));
    }
    let n = matrix_a.rows();
    if r == 0 || r >= n {
        return Err(GistError::arg(format!("rank {r} must lie in [1, {n})")));
    }
    let (vb, lb) = top_eigenspace(matrix_b, r)?;
    let scale = lb.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gap = lb[r - 1] - lb[r];
    let tolerance = (gap_tol_rel * scale).max(f64::MIN_POSITIVE);
    if !(gap > tolerance) {
        return Err(GistError::DegenerateGap {
            rank: r,
            gap,
            tolerance,
        });
    }
    let (va, _) = top_eigenspace(matrix_a, r)?;
    let lhs = principal_angles(&va, &vb)?.sin_theta_max;
    let perturbation_norm = linalg::spectral_norm_symmetric(&matrix_a.sub(matrix_b));
    let rhs = perturbation_norm / gap;
    Ok(DavisKahanCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
        perturbation_norm,
        gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gm(rows: &[Vec<f64>]) -> GradientMatrix {
        let ids = (0..rows.len()).map(|i| format!("t{i}")).collect();
        GradientMatrix::from_f64_rows(rows, ids, "ck").unwrap()
    }

    #[test]
    fn row_gram_of_single_row() {
        let g = accumulate_gram([Ok(gm(&[vec![3.0, 4.0]]))], GramMode::Row).unwrap();
        assert_eq!(g, Matrix::from_rows(&[vec![25.0]]));
    }

    #[test]
    fn identity_rows() {
        let m = gm(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let row = accumulate_gram([Ok(m.clone())], GramMode::Row).unwrap();
        assert_eq!(row, Matrix::identity(2));
        let col = accumulate_gram([Ok(m)], GramMode::Col).unwrap();
        assert_eq!(col, Matrix::identity(2).scale(0.5));
    }

    #[test]
    fn gram_rejects_empty_and_mismatch() {
        let empty: Vec<Result<GradientMatrix>> = vec![];
        assert!(matches!(
            accumulate_gram(empty, GramMode::Row),
            Err(GistError::Argument(_))
        ));
        let a = gm(&[vec![1.0, 2.0]]);
        let b = gm(&[vec![1.0, 2.0, 3.0]]);
        assert!(matches!(
            accumulate_gram([Ok(a), Ok(b)], GramMode::Row),
            Err(GistError::Argument(_))
        ));
    }

    #[test]
    fn rank_one_projector() {
        let (p, report) =
            build_projector(&gm(&[vec![0.0, -3.0, 4.0]]), &RankPolicy::default()).unwrap();
        assert_eq!(p.rank(), 1);
        assert_eq!(report.branch, RankBranch::FewShotOverride);
        let expected = [0.0, -0.6, 0.8];
        for (a, b) in p.column(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn all_zero_targets_are_degenerate() {
        let err = build_projector(
            &gm(&[vec![0.0, 0.0], vec![0.0, 0.0]]),
            &RankPolicy::default(),
        );
        assert!(matches!(err, Err(GistError::DegenerateSubspace(_))));
    }

    #[test]
    fn parallel_rows_give_rank_one_in_both_branches() {
        let rows: Vec<Vec<f64>> = (1..=20)
            .map(|k| vec![k as f64, 2.0 * k as f64, -(k as f64)])
            .collect();
        let (p, report) = build_projector(&gm(&rows), &RankPolicy::default()).unwrap();
        assert_eq!(report.branch, RankBranch::VarianceThreshold);
        assert_eq!(p.rank(), 1);
        let (p, report) = build_projector(&gm(&rows[..5]), &RankPolicy::default()).unwrap();
        assert_eq!(report.branch, RankBranch::FewShotOverride);
        assert_eq!(report.numerical_rank, 1);
        assert_eq!(p.rank(), 1);
    }

    #[test]
    fn sign_convention() {
        let mut c = vec![0.1, -0.9, 0.3];
        apply_sign_convention(&mut c);
        assert_eq!(c, vec![-0.1, 0.9, -0.3]);
    }

    #[test]
    fn max_rank_caps() {
        let policy = RankPolicy {
            max_rank: Some(2),
            ..RankPolicy::default()
        };
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0],
            vec![0.0, 0.0, 3.0],
        ];
        let (p, report) = build_projector(&gm(&rows), &policy).unwrap();
        assert_eq!(p.rank(), 2);
        assert_eq!(report.branch, RankBranch::MaxRankCap);
        assert!(RankPolicy {
            variance_threshold: 0.0,
            ..RankPolicy::default()
        }
        .validate()
        .is_err());
        assert!(RankPolicy {
            variance_threshold: 1.5,
            ..RankPolicy::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn project_basis_columns_and_orthogonal_vectors() {
        let rows = vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 2.0, 0.0]];
        let (p, _) = build_projector(&gm(&rows), &RankPolicy::default()).unwrap();
        for c in 0..p.rank() {
            let coords = p.project_row_f64(p.column(c));
            for (k, v) in coords.iter().enumerate() {
                let expect = if k == c { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12);
            }
        }
        let ortho = gm(&[vec![0.0, 0.0, 0.0, 5.0], vec![1.0, -1.0, 0.0, 0.0]]);
        let z = project(&p, &ortho).unwrap();
        assert!(z.max_abs() < 1e-7);
        assert!(project(&p, &gm(&[vec![1.0, 2.0]])).is_err());
    }

    #[test]
    fn full_rank_reconstructs_exactly() {
        let rows = vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]];
        let targets = gm(&rows);
        let (p, _) = build_projector(&targets, &RankPolicy::default()).unwrap();
        assert!(reconstruction_error(&p, &targets).unwrap() <= 1e-8);
    }

    #[test]
    fn angle_cases() {
        let a = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
        ]);
        let same = principal_angles(&a, &a).unwrap();
        assert_eq!(same.sin_theta_max, 0.0);
        let b = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        let far = principal_angles(&a, &b).unwrap();
        for t in far.principal_angles {
            assert!((t - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }
        assert!((far.sin_theta_max - 1.0).abs() < 1e-12);
        let skew = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        assert!(principal_angles(&skew, &skew).is_err());
    }

    #[test]
    fn planar_rotation_angle() {
        let axis = Matrix::from_rows(&[vec![1.0], vec![0.0]]);
        for alpha in [1e-9, 1e-4, 0.3, 0.75, 1.2, 1.55] {
            let line = Matrix::from_rows(&[vec![f64::cos(alpha)], vec![f64::sin(alpha)]]);
            let d = principal_angles(&axis, &line).unwrap();
            assert!(
                (d.principal_angles[0] - alpha).abs() < 1e-10,
                "alpha {alpha}: {:?}",
                d
            );
        }
    }

    #[test]
    fn davis_kahan_zero_perturbation_and_degenerate_gap() {
        let b = Matrix::diag(&[3.0, 1.0, 0.5]);
        let same = davis_kahan_bound_check(&b, &b, 1).unwrap();
        assert_eq!(same.lhs, 0.0);
        assert!(same.holds);
        let flat = Matrix::diag(&[1.0, 1.0, 0.0]);
        assert!(matches!(
            davis_kahan_bound_check(&b, &flat, 1),
            Err(GistError::DegenerateGap { .. })
        ));
        assert!(davis_kahan_bound_check(&b, &b, 3).is_err());
    }

    #[test]
    fn projector_file_round_trip() {
        let rows = vec![vec![1.0, 2.0, 0.5], vec![-1.0, 0.0, 3.0]];
        let (p, _) = build_projector(&gm(&rows), &RankPolicy::default()).unwrap();
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"GISTPROJ");
        let back = TargetProjector::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.rank(), p.rank());
        assert_eq!(back.singular_values(), p.singular_values());
        assert_eq!(back.source_checkpoint(), "ck");
        assert!(back.basis().max_abs_diff(&p.basis()) < 1e-7);
        assert!(matches!(
            TargetProjector::read_from(&mut &buf[..buf.len() - 2]),
            Err(GistError::Corruption(_))
        ));
    }

    #[test]
    fn spectrum_csv_columns() {
        let rep =
            SpectrumReport::from_singular_values(vec![2.0, 1.0], 2, &RankPolicy::default(), 1e-10)
                .unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "index,sigma,cumulative_variance,gap\n1,2,0.8,3\n2,1,1,1\n"
        );
    }
}
