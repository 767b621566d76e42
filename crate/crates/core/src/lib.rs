//! Neural importance sampling with piecewise-polynomial coupling flows.
//!
//! The crate learns sampling densities on the unit hypercube for Monte Carlo
//! integration. Flows are compositions of coupling layers whose per-dimension
//! warps (additive, multiply-add, piecewise-linear or piecewise-quadratic)
//! are driven by small fully connected networks, trained online from
//! unnormalized integrand estimates with KL or chi-square gradients.

pub mod bench;
pub mod coupling;
pub mod encoding;
pub mod error;
pub mod flow;
pub mod mis;
pub mod nnet;
pub mod rng;
pub mod training;

pub use error::{FlowError, Result};
