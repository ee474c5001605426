//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A query point fell outside the rectangular workspace.
    #[error("point ({x}, {y}) outside workspace")]
    OutsideWorkspace { x: f64, y: f64 },

    /// A configuration value violated its constraints.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A model parameter violated its invariants (non-SPD covariance,
    /// weights off the simplex, malformed obstacle geometry, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A mixture component's free-space mass fell below the usable floor.
    #[error("component {component} fully blocked by obstacles")]
    ComponentBlocked { component: usize },

    /// Two gridded fields with different shapes were combined.
    #[error("density fields live on different grids")]
    GridMismatch,

    /// A sample had zero density under the model; the likelihood is +inf.
    #[error("sample {index} has zero density (negative log-likelihood diverges)")]
    ZeroDensitySample { index: usize },

    /// Parameter learning diverged; carries the objective trace up to the
    /// failure in f64 regardless of the working scalar type.
    #[error("parameter learning diverged after {} iterations", trace.len())]
    Diverged { trace: Vec<f64> },

    /// Random scene generation could not satisfy its placement constraints.
    #[error("obstacle placement infeasible after {attempts} proposals")]
    PlacementInfeasible { attempts: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed artifact file (samples CSV, trajectory file, raster, ...).
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
