//! Targeted data selection by spectral filtering of target-set gradients.
//!
//! The pipeline has three stages:
//!
//! 1. [`gradstore`] holds per-example gradient features on disk and streams them in chunks.
//! 2. [`spectral`] recovers the dominant right-singular subspace of the target gradient
//!    matrix through the small `n × n` Gram matrix and picks its rank.
//! 3. [`scoring`] projects candidate gradients into that subspace, scores them by cosine
//!    alignment against every target example, keeps the best match and selects the top-k.
//!
//! [`oracle`] contains small analytic models (quadratics, a LoRA-factorized quadratic, a
//! multinomial-logit NLL model) with exact gradients and Hessians. They generate desk-scale
//! data and check the curvature and subspace-stability claims the method relies on.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gradstore;
pub mod linalg;
pub mod oracle;
pub mod pipeline;
pub mod scoring;
pub mod spectral;

pub use error::{GistError, Result};
pub use gradstore::{FeatureFileHeader, FeatureReader, GradientMatrix};
pub use scoring::{Aggregation, Alignment, ScoreTable, SelectionResult};
pub use spectral::{RankPolicy, SpectrumReport, TargetProjector};
