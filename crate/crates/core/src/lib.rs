//! Hierarchical Bayesian latent-class model of longitudinal biomarker and
//! biopsy data, with a batch MCMC fitter and an importance-sampling engine
//! for fast posterior updates on new patients and new measurements.

// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimators;
pub mod eval;
pub mod importance;
pub mod io;
pub mod mcmc;
pub mod model;
pub mod rng;
pub mod sim;
pub mod store;

pub use error::{Error, Result};
