//! Score-based diffusion policies for goal-conditioned behavior generation.
//!
//! The crate trains denoisers on play data by denoising score matching with
//! goal dropout, and samples actions through a family of deterministic and
//! stochastic solvers over the probability-flow ODE. Analytic Gaussian and
//! mixture oracles provide exact references for the samplers and training
//! pipeline; a planar push environment supplies a goal-conditioned task at
//! desk scale.

pub mod checkpoint;
pub mod denoiser;
pub mod error;
pub mod metrics;
pub mod rng;
pub mod samplers;
pub mod schedules;
pub mod selfcheck;
pub mod stats;
pub mod tensor;
pub mod toyenv;
pub mod training;

pub use error::{CoreError, Result};
pub use rng::RngStream;
pub use tensor::Tensor;
