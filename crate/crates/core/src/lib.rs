//! Conditional density estimation for energy disaggregation.
//!
//! A conditional VAE whose prior over the latent code is a conditional
//! normalizing flow. Given an aggregate power window `y`, the model draws
//! per-appliance power windows `x` and reports their spread.
//!
//! Layout:
//! - [`autodiff`]: tensors, reverse-mode tape, Adam.
//! - [`nn`]: convolution layers and gated blocks.
//! - [`flow`]: actnorm, invertible 1x1 convolution, conditional affine
//!   coupling, step-flow blocks, and the conditional Gaussian base.
//! - [`model`]: encoder, conditioning network, decoder, loss, sampling.
//! - [`train`]: mini-batch training loop.
//! - [`data`]: CSV ingestion, windowing, normalization, folds, synthetic data.
//! - [`metrics`]: NDE/SAE, evaluation, cross-validation, ablations.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
