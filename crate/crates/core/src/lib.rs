//! Nonlocal Cucker-Smale flocking with a fractional influence kernel.
//!
//! The crate simulates the agent system, solves the fractional pressureless
//! Euler equations with finite volumes, and recovers the fractional order
//! from agent data with a Gaussian-process surrogate and expected improvement.
//!
//! Numerical types are generic over [`Real`] (`f32` or `f64`); the aliases
//! below fix `f64`.

#![allow(clippy::excessive_precision, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod agents;
pub mod bayesopt;
pub mod error;
pub mod fvm1d;
pub mod fvm2d;
pub mod gpr;
pub mod io;
pub mod kernel;
pub mod pipeline;
pub mod quad;
pub mod scalar;
pub mod special;

pub use error::{Error, Result};
pub use scalar::Real;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Kernel = kernel::KernelSpec<f64>;
pub type Ensemble1D = agents::ParticleEnsemble<f64, 1>;
pub type Ensemble2D = agents::ParticleEnsemble<f64, 2>;
pub type Trajectory1D = agents::TrajectoryLog<f64, 1>;
pub type Trajectory2D = agents::TrajectoryLog<f64, 2>;
pub type Solution1D = fvm1d::EulerSolution1D<f64>;
pub type Solution2D = fvm2d::EulerSolution2D<f64>;
pub type Gp = gpr::GpModel<f64>;
pub type BoSettings = bayesopt::BoConfig<f64>;
pub type Scenario = pipeline::ScenarioConfig<f64>;
