//! Energy-based diffusion models with Fokker-Planck regularization for
//! low-dimensional Boltzmann systems.
//!
//! The crate covers the whole pipeline: analytic toy potentials and reference
//! Langevin data ([`systems`]), the VP diffusion process and reverse sampler
//! ([`diffusion`]), conservative energy networks and time-gated experts
//! ([`energy_model`]), Fokker-Planck residuals and the weak-form regularizer
//! ([`fokker_planck`]), training ([`trainer`]), score-driven Langevin
//! simulation ([`simulate`]), comparison metrics ([`metrics`]) and on-disk
//! formats ([`io`]).

pub mod diffusion;
pub mod energy_model;
pub mod error;
pub mod fokker_planck;
pub mod io;
pub mod metrics;
pub mod nd;
mod par;
pub mod samples;
pub mod simulate;
pub mod systems;
pub mod trainer;

pub use error::{Error, Result};
pub use nd::{ParamVector, Tensor};
pub use samples::SampleSet;

/// Lowest diffusion time used for training and sampling.
pub const T_EPS: f64 = 1e-5;
