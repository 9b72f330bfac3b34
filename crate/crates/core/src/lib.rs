//! Semi-supervised diffusion autoencoder for brain age prediction.
//!
//! A U-Net noise predictor is conditioned on a semantic latent produced by a
//! separate encoder; an MLP head regresses age from the same latent. The
//! crate also carries the slice preprocessing, a synthetic phantom
//! generator, and the statistics used to evaluate age-gap biomarkers.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod networks;
pub mod rng;
pub mod schedule;
pub mod training;

pub use error::{Error, Result};
