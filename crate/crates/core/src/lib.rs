//! Blind motion deblurring with a patch-wise neural predictor of Fourier
//! deconvolution filters.
//!
//! The pipeline has three stages:
//!
//! 1. [`restore`] runs the network on every overlapping 65x65 patch and blends
//!    the 33x33 restorations with a Hann window into an initial estimate.
//! 2. [`kernel_est`] fits one global blur kernel relating the blurry input to
//!    that estimate.
//! 3. [`nonblind`] deconvolves the input with the fitted kernel.
//!
//! [`trainer`] synthesises training pairs on the fly and fits the network,
//! [`eval`] scores restorations by their error ratio against a known-kernel
//! deconvolution.

pub mod bands;
pub mod cli;
pub mod corpus;
pub mod eval;
pub mod error;
pub mod filter;
pub mod fourier;
pub mod image;
pub mod kernel_est;
pub mod kernel_synth;
pub mod net;
pub mod nonblind;
pub mod restore;
pub mod trainer;

pub use error::{Error, Result};
