//! Non-asymptotic central limit theorems for Markov chains and averaged TD
//! learning, made computable.
//!
//! - [`linalg`]: small dense matrices, Lyapunov solves, PSD square roots.
//! - [`markov`]: finite chains, Poisson equation, asymptotic covariance.
//! - [`stein`]: Stein-method constants and the martingale CLT bound.
//! - [`td`]: TD(0) as a jump-linear system with Polyak-Ruppert averaging.
//! - [`stats`]: Wasserstein-1 estimators, Gaussian sampling, rate fits.
//! - [`harness`]: experiment configs, ensembles and CSV/JSON reports.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod harness;
pub mod linalg;
pub mod markov;
pub mod rng;
pub mod stats;
pub mod stein;
pub mod td;

pub use error::{Error, Result};
