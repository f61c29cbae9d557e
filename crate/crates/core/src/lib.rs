//! Gaussian determinantal point processes: kernel and correlation
//! functions, exact simulation on a torus, the scattering-matrix estimator,
//! spiked-model inference and DPP-based dimension reduction.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod dense;
pub mod dimred;
pub mod error;
pub mod estimator;
pub mod io;
pub mod kernel;
pub mod sampler;
pub mod spiked;
pub mod validate;

pub use error::{Error, Result};
