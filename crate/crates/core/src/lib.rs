//! Differentiable unstructured finite-volume solver.
//!
//! The crate is organised around a graph view of a polyhedral mesh: cell
//! fields live on graph nodes, face fields live on edges, and every
//! discrete operator is composed from three primitives (gather, per-edge
//! map, scatter-add). Reverse-mode differentiation works at the level of
//! those primitives, so a transient pressure–velocity simulation can be
//! differentiated end to end with hand-written adjoints and binomial
//! checkpointing instead of elementwise taping.
//!
//! Module map:
//! - [`mesh`]: OpenFOAM/VTK I/O, mesh generators, geometry.
//! - [`graph`]: owner/neighbour edge structure and deterministic
//!   gather/scatter plans.
//! - [`tape`]: the operation tape that records coarse primitives for
//!   reverse-mode differentiation.
//! - [`fvops`]: face interpolation, Green–Gauss gradients, convective and
//!   diffusive fluxes built on tape ops.
//! - [`linalg`]: CSR matrices, ILU(0), and Krylov solvers.
//! - [`bc`]: boundary conditions, including Windkessel RCR outlets.
//! - [`solvers`]: Poisson, scalar transport, and PISO stepping.
//! - [`adjoint`]: tape replay, linear-solve adjoints, checkpointing.
//! - [`inverse`]: observations, losses, Adam, and the inverse drivers.

pub mod adjoint;
pub mod bc;
pub mod error;
#[cfg(test)]
pub(crate) mod fixtures;
pub mod fvops;
pub mod graph;
pub mod inverse;
pub mod linalg;
pub mod math;
pub mod mesh;
pub mod solvers;
pub mod tape;

pub use error::{Error, Result};
pub use math::Vec3;
