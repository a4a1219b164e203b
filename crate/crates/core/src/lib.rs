//! Nonparametric estimation for spatio-temporal regression with
//! infinite-dimensional covariates.
//!
//! Irregularly located responses are aggregated onto an orthonormal basis,
//! each basis coefficient is regressed on the covariate sequence with a
//! compactly supported kernel, and the fitted components are reassembled into
//! mean and covariance surfaces with pointwise and simultaneous bands.

pub mod aggregation;
pub mod basis;
pub mod cli;
pub mod covariance;
pub mod domain;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod kernel;
pub mod quadrature;
pub mod simulation;

pub use error::{Error, Result};
