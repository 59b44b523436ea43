//! Minimal CPU deep-learning engine and the three land-cover CNNs built on
//! it: a plain convolutional baseline, a CBAM-augmented network, and a
//! residual network with balanced spatial/spectral attention.

mod error;

pub mod attention;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod engine;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod regularization;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
