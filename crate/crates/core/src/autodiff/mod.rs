//! Minimal reverse-mode differentiation engine: a tape of coarse tensor ops,
//! named parameters with Adam state, checkpoints and finite-difference checks.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use kernels::Padding;
pub use params::{AdamConfig, ParamEntry, ParamStore, StepOutcome};
