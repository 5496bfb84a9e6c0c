//! Generalized Poisson-Kingman partitions built on negative binomial point processes.
//!
//! The crate evaluates the exchangeable partition probability function of the
//! class PK^(r)(ρ) by one-dimensional quadrature over an auxiliary variable,
//! the associated prediction weights, a sequential urn sampler, and the
//! backward (coalescent) recursion for sample configurations.

pub mod coalescent;
pub mod error;
pub mod levy;
pub mod numerics;
pub mod partitions;
pub mod posterior;
pub mod sampler;
pub mod special;
pub mod validation;

pub use error::{Error, Result};
pub use levy::{LevyModel, ModelKind, ModelParams};
pub use numerics::{QuadratureSpec, Transform};
pub use partitions::{AfsVector, Configuration};
pub use posterior::PredictiveWeights;
