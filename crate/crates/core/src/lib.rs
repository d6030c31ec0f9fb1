//! Classifier-guided diffusion sampling on Gaussian-mixture targets.
//!
//! Every score, posterior and log-likelihood is closed form, so guided
//! samplers, calibration diagnostics and quality metrics can be checked
//! against exact answers rather than learned networks.

pub mod calibration;
pub mod classifier;
pub mod config;
pub mod error;
pub mod experiment;
pub mod guidance;
pub mod io;
pub mod metrics;
pub mod mixture;
pub mod plot;
pub mod samplers;
pub mod schedule;
pub mod verify;

pub use error::{Error, Result};
