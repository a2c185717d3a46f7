//! Infinite-width neural tangent kernels for fully-connected networks with
//! optional layer normalisation, finite-width networks with exact gradients,
//! kernel regression with output-bound certificates, and the experiment
//! drivers behind the `ntkln` binary.

pub mod error;
pub mod experiments;
pub mod activations;
pub mod cli;
pub mod analytic_ntk;
pub mod empirical_net;
pub mod gp_predictor;
pub mod numerics;

pub use error::{Error, Result};
