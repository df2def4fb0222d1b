//! Crate-wide error type.
//!
//! One flat enum keeps error handling uniform across modules and lets the
//! CLI map every failure class to a distinct exit code.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    // ---- mesh I/O ----
    #[error("missing mesh file: {path}")]
    MissingMeshFile { path: String },
    #[error("unsupported format in {path}: {reason}")]
    UnsupportedFormat { path: String, reason: String },
    #[error("parse error in {path}:{line}: {msg}")]
    ParseError { path: String, line: usize, msg: String },
    #[error("mesh consistency error: {msg}")]
    MeshConsistencyError { msg: String },
    #[error("degenerate face {face}: |Sf| = {area:.3e}")]
    DegenerateFace { face: usize, area: f64 },
    #[error("inverted cell {cell}: volume = {volume:.3e}")]
    InvertedCell { cell: usize, volume: f64 },
    #[error("unsupported VTK cell type {type_id}")]
    UnsupportedCellType { type_id: i32 },
    #[error("mesh resolution must be >= 2, got {n}")]
    InvalidResolution { n: usize },
    #[error("patch '{patch}' has no boundary condition for field '{field}'")]
    MissingBoundarySpec { field: String, patch: String },
    #[error("unsupported scheme '{keyword}' for {context}; supported: {supported}")]
    UnsupportedScheme { keyword: String, context: String, supported: String },

    // ---- graph ----
    #[error("non-convex cell pair on edge {edge}: Sf·d = {dot:.3e} <= 0")]
    NonConvexPairError { edge: usize, dot: f64 },
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeError { context: String, expected: String, got: String },

    // ---- discretization ----
    #[error("extreme non-orthogonality on face {face}: |S_hat·d_hat| = {cosine:.3e}")]
    ExtremeNonOrthogonality { face: usize, cosine: f64 },

    // ---- linear algebra ----
    #[error("zero diagonal entry at row {row}")]
    SingularDiagonal { row: usize },
    #[error("ILU(0) pivot breakdown at row {row}")]
    PivotBreakdown { row: usize },
    #[error("{method} did not converge: residual {residual:.3e} after {iterations} iterations")]
    NotConverged { method: String, residual: f64, iterations: usize, best: Vec<f64> },
    #[error("{method} breakdown: |{scalar}| = {value:.3e} < 1e-30")]
    SolverBreakdown { method: String, scalar: String, value: f64 },

    // ---- boundary conditions ----
    #[error("time {t} outside inflow table [{t0}, {t1}] and table is not periodic")]
    ExtrapolationError { t: f64, t0: f64, t1: f64 },
    #[error("invalid Windkessel parameters: {msg}")]
    InvalidWindkesselParams { msg: String },
    #[error("diastolic decay fit failed: {msg}")]
    DecayFitError { msg: String },

    // ---- solvers ----
    #[error("non-positive momentum diagonal a_P = {value:.3e} in cell {cell}")]
    InvalidCoefficients { cell: usize, value: f64 },
    #[error("numerical blow-up at step {step}: {msg}")]
    NumericalBlowup { step: usize, msg: String },
    #[error("continuity violation at step {step}: max |div(mdot)| = {max_div:.3e} > {limit:.3e}")]
    ContinuityViolation { step: usize, max_div: f64, limit: f64 },
    #[error("step {step} failed: {source}")]
    StepFailed { step: usize, source: Box<Error> },

    // ---- adjoint / inverse ----
    #[error("operation '{name}' has no registered adjoint")]
    NonDifferentiableOp { name: String },
    #[error("checkpoint budget must be >= 1, got {s}")]
    InvalidBudget { s: usize },
    #[error("probe index {probe} out of range (n_cells = {n_cells})")]
    InvalidProbe { probe: usize, n_cells: usize },
    #[error("non-finite gradient for parameter {param}")]
    GradientBlowup { param: usize },
    #[error("log-reparametrization reference must be positive, got {value:.3e}")]
    InvalidReference { value: f64 },

    #[error("I/O error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn mesh(msg: impl Into<String>) -> Self {
        Error::MeshConsistencyError { msg: msg.into() }
    }

    /// Exit-code class used by the CLI; one code per broad failure family.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            MissingMeshFile { .. } | ParseError { .. } | Io { .. } => 10,
            UnsupportedFormat { .. } | UnsupportedScheme { .. } | UnsupportedCellType { .. } => 11,
            MeshConsistencyError { .. }
            | DegenerateFace { .. }
            | InvertedCell { .. }
            | InvalidResolution { .. }
            | MissingBoundarySpec { .. }
            | NonConvexPairError { .. }
            | ShapeError { .. }
            | ExtremeNonOrthogonality { .. } => 12,
            SingularDiagonal { .. }
            | PivotBreakdown { .. }
            | NotConverged { .. }
            | SolverBreakdown { .. }
            | InvalidCoefficients { .. } => 20,
            NumericalBlowup { .. } => 21,
            ContinuityViolation { .. } => 22,
            StepFailed { source, .. } => source.exit_code(),
            ExtrapolationError { .. } | InvalidWindkesselParams { .. } | DecayFitError { .. } => 23,
            NonDifferentiableOp { .. }
            | InvalidBudget { .. }
            | InvalidProbe { .. }
            | GradientBlowup { .. }
            | InvalidReference { .. } => 30,
        }
    }
}
