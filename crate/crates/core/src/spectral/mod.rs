//! Discretized one-generation operator of the killed branching process,
//! its leading eigenpair at the critical level, and the derived constants.

mod eigen;
mod function;
mod grid;
mod kernel;
mod model;
mod operator;
mod table;

pub use eigen::{leading_eigenpair, second_eigenvalue};
pub use function::GridFunction;
pub use grid::{build_grid, GridParams, GridSpec, PANEL_ORDER};
pub use kernel::{KernelCdf, KernelTables};
pub use model::{
    chi_regularity_report, find_h_star, lambda_at_level, project_off_chi, spine_kernel_cdf,
    ChiRegularity, GridDocument, ModelDocument, SpectralModel,
};
pub use operator::{assemble_operator, OperatorMatrix};
pub use table::{Extrapolation, FineTable};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpectralError {
    #[error("branching number must be at least 2, got {0}")]
    InvalidBranching(u32),
    #[error("invalid grid parameter: {0}")]
    InvalidGrid(String),
    #[error("grid of {n_points} points cannot resolve the quadrature (error {error:.3e} > {tolerance:.1e})")]
    ResolutionInsufficient {
        n_points: usize,
        error: f64,
        tolerance: f64,
    },
    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: &'static str, iterations: usize },
    #[error("second eigenvalue {0} is not inside (0, 1)")]
    DeflationFailure(f64),
    #[error("could not bracket lambda = 1: {0}")]
    BracketFailure(String),
    #[error("kernel row {row} has mass {mass} before normalization")]
    KernelTruncation { row: usize, mass: f64 },
    #[error("model document is inconsistent: {0}")]
    InvalidDocument(String),
}
