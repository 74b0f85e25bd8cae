//! Spatio-temporal masked autoencoding for longitudinal 3D volumes.
//!
//! A weight-shared ViT encodes an earlier visit in full and a later visit
//! with most patches masked; a cross-attention decoder reconstructs the
//! masked patches from the earlier visit, an interval encoding, and a
//! categorical latent whose prior only sees the earlier visit.

pub mod analysis;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod latentvar;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synthvol;
pub mod temporal;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
