//! Numeric substrate: symmetric eigensolver, adaptive ODE integrator,
//! adaptive quadrature and counter-based random streams.

pub mod eig;
pub mod ode;
pub mod quad;
pub mod rng;

pub use eig::{sym_eig, EigenPair};
pub use ode::{rk45, OdeSolution, Rk45Options};
pub use quad::adaptive_quad;
pub use rng::{inverse_normal_cdf, rng_split, RngStream};
