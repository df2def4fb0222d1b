//! Equation solvers built on the graph operators: steady Poisson with
//! non-orthogonal Picard correction, transient scalar transport, and the
//! incompressible PISO loop.

mod piso;
mod poisson;
mod scalar;
mod transient;

pub use piso::*;
pub use poisson::*;
pub use scalar::*;
pub use transient::*;

use crate::error::{Error, Result};

/// Time integration scheme for the transient solvers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeScheme {
    ForwardEuler,
    BackwardEuler,
    CrankNicolson,
}

impl TimeScheme {
    pub fn name(self) -> &'static str {
        match self {
            TimeScheme::ForwardEuler => "forward Euler",
            TimeScheme::BackwardEuler => "backward Euler",
            TimeScheme::CrankNicolson => "Crank-Nicolson",
        }
    }

    /// OpenFOAM `ddtSchemes` keywords.
    pub fn parse(keyword: &str) -> Result<TimeScheme> {
        match keyword {
            "explicitEuler" | "forwardEuler" => Ok(TimeScheme::ForwardEuler),
            "Euler" | "backwardEuler" => Ok(TimeScheme::BackwardEuler),
            "CrankNicolson" => Ok(TimeScheme::CrankNicolson),
            other => Err(Error::UnsupportedScheme {
                keyword: other.into(),
                context: "ddtSchemes".into(),
                supported: "Euler, explicitEuler, CrankNicolson".into(),
            }),
        }
    }

    /// Implicit weight θ: new-time flux fraction of the spatial operator.
    pub fn theta(self) -> f64 {
        match self {
            TimeScheme::ForwardEuler => 0.0,
            TimeScheme::BackwardEuler => 1.0,
            TimeScheme::CrankNicolson => 0.5,
        }
    }
}
