//! Batch reinforcement learning with fitted Q-iteration under log-loss or
//! squared loss.
//!
//! The crate is organized bottom-up:
//!
//! - [`loss`]: scalar losses and Bernoulli divergences.
//! - [`mdp`]: exact finite-MDP dynamic programming.
//! - [`theory`]: randomized numerical checks of the inequalities behind the
//!   small-cost analysis of log-loss FQI.
//! - [`features`] and [`model`]: Fourier features and `[0,1]`-valued Q-models.
//! - [`bfgs`]: quasi-Newton minimizer used for every regression.
//! - [`fqi`]: stationary and finite-horizon fitted Q-iteration.
//! - [`env`]: mountain car and inverted pendulum simulators.
//! - [`dataset`]: batch collection with rejection sampling, and persistence.
//! - [`experiment`]: config-driven experiment runs and reporting.

// `!(x > 0.0)` is how NaN gets rejected along with the out-of-range values,
// and the dynamic-programming loops read better indexed by state.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bfgs;
pub mod dataset;
pub mod env;
pub mod error;
pub mod experiment;
pub mod features;
pub mod fqi;
pub mod loss;
pub mod mdp;
pub mod model;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
pub use loss::{LossKind, Prob};

/// Version string echoed into run artifacts.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
