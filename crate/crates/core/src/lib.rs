//! gRDA: generalized regularized dual averaging with sparsity-inducing
//! proximal maps, its mean ODE and fluctuation SDE limits, and a
//! Monte-Carlo harness for asymptotic confidence bands.

pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod numerics;
pub mod models;
pub mod optimizer;
pub mod sde;

pub use error::{Error, Result};
