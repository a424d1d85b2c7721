//! Stochastic theta methods (STM) and backward Euler (BEM) for monotone
//! jump-diffusion SDEs
//!
//! ```text
//! dX(t) = b(X(t-)) dt + sigma(X(t-)) dW(t) + integral_Z gamma(X(t-), z) Ntilde(dt, dz)
//! ```
//!
//! with a finite-activity compensated Poisson random measure `Ntilde`. Drifts
//! may grow super-linearly; the library targets the monotone regime where
//! implicit schemes stay well-posed and ergodic while the explicit Euler
//! baseline can blow up.
//!
//! Modules:
//! - [`model`]: problem definitions, assumption certificates, step-size checks
//! - [`noise`]: reproducible Brownian/jump noise with dyadic bridge refinement
//! - [`integrators`]: implicit solves, one-step map, chain drivers
//! - [`ergodicity`]: Lyapunov audits, contraction curves, invariant ensembles
//! - [`weakerr`]: weak-error curves, order fits, invariant-measure gaps
//! - [`sensitivity`]: first-variation chains and derivative estimates
//!
//! All Monte Carlo entry points take a master seed and derive one counter-based
//! stream per (path, purpose); reductions run in a fixed order, so results are
//! byte-identical for any worker count.

// Validation guards use `!(x > y)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod ergodicity;
pub mod integrators;
pub mod model;
pub mod noise;
pub mod rng;
pub mod sensitivity;
pub mod stats;
pub mod weakerr;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
