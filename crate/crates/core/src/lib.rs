//! Two-level super-resolution VAE (srVAE) and its single-level VAE baseline:
//! hierarchical latent-variable density estimation with a coupling-flow
//! prior, a discretized logistic mixture likelihood and deterministic
//! image compression, trained end-to-end on small images.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod distributions;
pub mod downscale;
pub mod error;
pub mod eval;
pub mod flow;
pub mod models;
pub mod numerics;
pub mod params;
pub mod training;

pub use error::{Error, Result};
