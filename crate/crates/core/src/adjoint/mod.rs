//! Reverse-mode differentiation of time-dependent simulations.
//!
//! Builds on the recording tape in [`crate::tape`]: schedules that trade
//! recomputation for memory ([`checkpoint`]), a driver that differentiates a
//! multi-step simulation under such a schedule ([`transient_grad`]), and a
//! registry of finite-difference checks for every differentiable primitive
//! ([`registry`]).

pub mod checkpoint;

pub use checkpoint::{
    default_snapshot_budget, max_reversible_steps, plan_checkpoints, Action, CheckpointPlan,
};
