//! Exact online gradients for recurrent networks.
//!
//! The carried sensitivity `Δ_N = dR_N/dP` is advanced one step at a time
//! ([`sensitivity`]), so the gradient of the current output with respect to
//! the parameters is available at every step at a cost that does not grow
//! with sequence length. [`baselines`] holds the replay-based reference
//! methods used to check it.

pub mod baselines;
pub mod cells;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod sensitivity;
pub mod tasks;

pub use baselines::{GradientMethod, MethodKind, TapeStep, TrajectoryTape};
pub use cells::{build_cell, Cell, CellJacobians, CellSignature, CellStep};
pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
pub use sensitivity::{
    assemble_output_gradient, fse_step, fse_step_multi, init_state, run_online, sgd_update,
    LossSpec, OnlineConfig, OnlineEngine, OutputGradient, SensitivityState,
};
pub use tasks::SplitMix64;
