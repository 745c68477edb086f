//! Entropy-regularised, data-driven stochastic control with mean-field
//! particle networks.
//!
//! - [`mfnet`]: one-hidden-layer networks over an empirical parameter measure
//! - [`env`]: the problem contract plus the Merton and Zermelo benchmarks
//! - [`rollout`]: empirical Q-functions and the trajectory adjoint
//! - [`trainer`]: backward induction with noisy gradient descent
//! - [`eval`]: generalisation estimates, grids and oracle gaps

pub mod env;
pub mod error;
pub mod eval;
pub mod mfnet;
pub mod rng;
pub mod rollout;
pub mod trainer;

pub use env::{ControlProblem, Dataset, EnvPath, PathSampler};
pub use error::{Error, Result};
pub use mfnet::{Activation, InitSpec, Particle, ParticleEnsemble};
pub use rollout::GibbsVector;
pub use trainer::{RegSpec, TrainConfig};
