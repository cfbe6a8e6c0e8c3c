//! Desk-scale analytic models with exact derivatives, plus the suites that use them to check
//! the curvature and subspace claims behind spectral selection.

pub mod adam;
pub mod influence;
pub mod lora;
pub mod nll;
pub mod quadratic;
pub mod suites;
pub mod targeted;
pub mod toydata;

pub use adam::{adam_step, AdamConfig, AdamState, LrSchedule};
pub use influence::{decompose_utility, influence_prediction_check, influence_score, spearman};
pub use lora::LoraModel;
pub use nll::{LabeledExample, NllToyModel};
pub use quadratic::{
    diagonal_floor, newton_step, run_trajectory, Optimizer, QuadraticLandscape, Trajectory,
};
