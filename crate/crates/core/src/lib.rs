//! Reconstruction-free anomaly detection with a denoising diffusion U-Net.
//!
//! A small noise-prediction U-Net is trained on normal image patches. A new
//! image is scored by noising each patch with a single forward diffusion step,
//! predicting that noise, and stitching the predictions into a full-image
//! noise map. Edge energy of the blurred map gives a two-number feature
//! vector that an isolation forest classifies.
//!
//! This crate is `no_std` (it needs `alloc`); file formats, image IO and the
//! command line live in the companion `diffad` crate.

#![no_std]
// Validation uses `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod features;
pub mod iforest;
pub mod numerics;
pub mod patching;
pub mod rng;
pub mod unet;

pub use error::{Error, Result};
pub use numerics::{Tape, Tensor, Var};
