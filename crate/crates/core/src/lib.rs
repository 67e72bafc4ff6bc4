//! Branching particle systems in a random environment.
//!
//! The crate provides the forward Monte Carlo particle system, a moment
//! oracle built from the dual PDE and its jump representation, a mild-form
//! solver for the limiting SPDE, and the measure-valued statistics used to
//! compare them.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`). The `f64`
//! instantiations are re-exported at the crate root under short names.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod duality;
pub mod grid;
pub mod kernels;
pub mod linalg;
pub mod measures;
pub mod mild;
pub mod particles;



pub mod scalar;
pub mod seed;

pub use error::{Error, Result};
pub use scalar::{Estimate, Real};
pub use seed::{derive_seed, stream, substream, Label, StreamRng};

pub type Grid = grid::Grid<f64>;
pub type GridField = grid::GridField<f64>;
pub type SymMatrix = linalg::SymMatrix<f64>;
pub type GaussianFactor = linalg::GaussianFactor<f64>;
pub type Profile = kernels::Profile<f64>;
pub type MatrixKernel = kernels::MatrixKernel<f64>;
pub type RhoKernel = kernels::RhoKernel<f64>;
pub type CorrelationKernel = kernels::CorrelationKernel<f64>;
pub type WhiteNoiseGrid = kernels::WhiteNoiseGrid<f64>;
pub type EmpiricalMeasure = particles::EmpiricalMeasure<f64>;
pub type ParticleSystem = particles::ParticleSystem<f64>;
pub type MotionConfig = particles::MotionConfig<f64>;
pub type SimConfig = particles::SimConfig<f64>;
pub type Trajectory = particles::Trajectory<f64>;
pub type TestFunction = measures::TestFunction<f64>;
pub type NParticleGenerator = duality::NParticleGenerator<f64>;
pub type JumpEstimator = duality::JumpEstimator<f64>;
pub type MildConfig = mild::MildConfig<f64>;
pub type FrozenEnvironment = mild::FrozenEnvironment<f64>;
pub type MildReplica = mild::MildReplica<f64>;
