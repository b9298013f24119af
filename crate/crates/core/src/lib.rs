//! Efficient RAW image denoising toolkit.
//!
//! A small tensor/autodiff engine drives a Feature-Align U-Net denoiser,
//! trained on synthetic heteroscedastic noise in the k-sigma domain with
//! Charbonnier, distillation and feature-matching losses. Around it sit the
//! Bayer/ISP pipeline, sensor noise calibration, noise-subrange model arrays,
//! PSNR/SSIM evaluation and a paired-exposure alignment tool.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod bayer;
pub mod dataset;
mod error;
pub mod fanet;
pub mod losses;
pub mod metrics;
pub mod noise;
pub mod nsma;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
