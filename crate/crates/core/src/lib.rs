//! Probabilistic moving-horizon estimation.
//!
//! The crate implements two recursive estimators derived from a common
//! measure-valued moving-horizon problem
//!
//! ```text
//! mu_k in argmin_mu  D(mu, f0# mu_{k-1}) + eta * E_mu[G_k]
//! ```
//!
//! - [`w2`]: `D` is half the squared 2-Wasserstein distance. Samples move by
//!   the proximal map `z_k = prox_{eta G_k}(f0(z_{k-1}))`.
//! - [`kl`]: `D` is the KL divergence. The density recursion is a particle
//!   filter weighted by `exp(-eta G_k)`.
//!
//! Both have entropy-regularized variants whose privacy budgets are computed
//! in [`privacy`]. [`oracle`] holds exact grid recursions and probability
//! metrics used to verify the estimators, [`observability`] the rank test,
//! and [`harness`] the experiment runner behind the `probmhe` binary.

// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod io;
pub mod kl;
pub mod model;
pub mod observability;
pub mod oracle;
pub mod privacy;
pub mod rng;
pub mod w2;

pub use error::{Error, Result};
pub use model::{NoiseSpec, State, SystemModel, Trajectory};
