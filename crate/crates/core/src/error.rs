use std::io;

use thiserror::Error;

use crate::spectral::ModeIndex;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("constraint violated: {field} = {value}")]
    Violation { field: String, value: f64 },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("vertical mesh has no node at the interface x3 = 0")]
    NoInterfaceNode,

    #[error("mesh mismatch: {0}")]
    MeshMismatch(String),

    #[error("mode mismatch: expected {expected:?}, found {found:?}")]
    ModeMismatch { expected: ModeIndex, found: ModeIndex },

    #[error("singular step system at mode {mode:?}")]
    SingularSystem { mode: ModeIndex },

    #[error("problem too large for the dense oracle: {dofs} unknowns (limit {limit})")]
    TooLarge { dofs: usize, limit: usize },

    #[error("generator requires strictly positive {0}")]
    DegenerateParams(&'static str),

    #[error("incompatible initial data: fluid-content residual {residual:e} exceeds {tolerance:e}")]
    IncompatibleData { residual: f64, tolerance: f64 },

    #[error("invalid initial data: {0}")]
    InvalidInitialData(String),

    #[error("energy balance violated at step {step}: residual {residual:e}")]
    BalanceViolation { step: usize, residual: f64 },

    #[error("trajectory grids or lengths differ: {0}")]
    GridMismatch(String),

    #[error("inertia must vanish before viscoelasticity: rho sweep needs delta > 0 in the base configuration")]
    OrderingViolation,

    #[error("need at least {needed} points, found {found}")]
    InsufficientPoints { needed: usize, found: usize },

    #[error("manufactured velocity is not divergence free (residual {0:e})")]
    NotDivergenceFree(f64),

    #[error("expression cannot be differentiated exactly: {0}")]
    NotDifferentiable(String),

    #[error("invalid sweep: {0}")]
    InvalidSweep(String),

    #[error("snapshot format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Machine-readable code used by the command-line driver.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Violation { .. } => "VIOLATION",
            Error::Parse { .. } => "PARSE",
            Error::DimensionMismatch { .. } => "DIMENSION_MISMATCH",
            Error::NoInterfaceNode => "NO_INTERFACE_NODE",
            Error::MeshMismatch(_) => "MESH_MISMATCH",
            Error::ModeMismatch { .. } => "MODE_MISMATCH",
            Error::SingularSystem { .. } => "SINGULAR_SYSTEM",
            Error::TooLarge { .. } => "TOO_LARGE",
            Error::DegenerateParams(_) => "DEGENERATE_PARAMS",
            Error::IncompatibleData { .. } => "INCOMPATIBLE_DATA",
            Error::InvalidInitialData(_) => "INVALID_INITIAL_DATA",
            Error::BalanceViolation { .. } => "BALANCE_VIOLATION",
            Error::GridMismatch(_) => "GRID_MISMATCH",
            Error::OrderingViolation => "ORDERING_VIOLATION",
            Error::InsufficientPoints { .. } => "INSUFFICIENT_POINTS",
            Error::NotDivergenceFree(_) => "NOT_DIVERGENCE_FREE",
            Error::NotDifferentiable(_) => "NOT_DIFFERENTIABLE",
            Error::InvalidSweep(_) => "INVALID_SWEEP",
            Error::Format { .. } => "FORMAT",
            Error::Io(_) => "IO",
        }
    }

    pub(crate) fn violation(field: &str, value: f64) -> Self {
        Error::Violation {
            field: field.to_string(),
            value,
        }
    }
}
