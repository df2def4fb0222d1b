//! Mesh ingestion, generation, geometry, and result output.
//!
//! The exchange type is [`RawMesh`]: points, face vertex loops, owner and
//! neighbour cell per face, and named boundary patches. Internal faces come
//! first (owner < neighbour, sorted owner-major); each patch is a contiguous
//! run of boundary faces and the patches tile the boundary exactly.

mod case;
mod foam;
mod generate;
mod geometry;
mod raw;
mod vtk;

pub use case::*;
pub use foam::*;
pub use generate::*;
pub use geometry::*;
pub use raw::*;
pub use vtk::*;
