//! Decoupled RAW-to-sRGB mapping.
//!
//! A shared encoder maps RAW mosaics, grayscale images and sRGB images into a
//! common latent space. A conditional diffusion model regenerates the
//! grayscale latent from the RAW latent, and a histogram-guided
//! cross-attention module colorizes it before decoding to sRGB.

pub mod checkpoint;
pub mod codec;
pub mod commands;
pub mod config;
pub mod error;
pub mod hccm;
pub mod imaging;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod raw;
pub mod rng;
pub mod schedule;
pub mod tadm;
pub mod trainer;

pub use error::{Error, Result};
