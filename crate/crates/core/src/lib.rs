//! Guidance laboratory for diffusion sampling.
//!
//! Classifier-free guidance (CFG) and adaptive projected guidance (APG) on
//! flat vectors, conversions between model parameterizations, exact
//! denoisers for Gaussian mixtures, a probability-flow ODE sampler and the
//! color statistics used to measure oversaturation.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod cli;
pub mod convert;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod sampler;

pub use error::{Error, Result};
