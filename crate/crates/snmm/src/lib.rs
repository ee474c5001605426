//! Occupancy-skewed normal mixture models for very-large-scale swarms.
//!
//! The crate implements a mixture family whose components are Gaussians
//! multiplied by a binary free-space indicator and renormalized, an
//! EM/gradient parameter learner for it, three macroscopic distribution
//! planners (displacement interpolation along the Gaussian transport
//! geodesic and two potential-field descents), and a microscopic swarm
//! controller that tracks the planned densities.
//!
//! The numeric core is generic over the scalar type (`f32`/`f64`, see
//! [`scalar::Scalar`]); concrete `f64` aliases for the main domain types
//! are exported at the crate root. The experiment driver and the file
//! formats are `f64`.

pub mod env;
pub mod error;
pub mod experiment;
pub mod grid;
pub mod io;
pub mod learn;
pub mod linalg;
pub mod mixture;
pub mod plan;
pub mod scalar;
pub mod swarm;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Concrete `f64` aliases for the main domain types.
pub type Vec2_64 = linalg::Vec2<f64>;
pub type Mat2_64 = linalg::Mat2<f64>;
pub type Workspace64 = env::Workspace<f64>;
pub type Obstacle64 = env::Obstacle<f64>;
pub type SkewField64 = env::SkewField<f64>;
pub type QuadratureGrid64 = grid::QuadratureGrid<f64>;
pub type DensityField64 = grid::DensityField<f64>;
pub type SnComponent64 = mixture::SnComponent<f64>;
pub type MixtureParams64 = mixture::MixtureParams<f64>;
pub type LearnConfig64 = learn::LearnConfig<f64>;
pub type ApfConfig64 = plan::ApfConfig<f64>;
pub type GoalSpec64 = plan::GoalSpec<f64>;
pub type PlanTrajectory64 = plan::PlanTrajectory<f64>;
pub type ControlConfig64 = swarm::ControlConfig<f64>;
