//! Full-reference perceptual quality metrics for compressed images.
//!
//! Two learned metrics share this crate:
//!
//! * [`SwinIqa`]: hierarchical features from a shifted-window transformer,
//!   mapped by a cross-attention block into a learned distance space and
//!   regressed to a score in `(0, 1)`.
//! * [`Dpis`]: VGG texture/structure similarity and AlexNet unit-normalized
//!   ℓ2 distances, each computed on the image and on its gradient map.
//!
//! Alongside them are PSNR and MS-SSIM baselines, the two-stage training
//! loop (MOS regression, then 2AFC judgments), and the evaluation harness
//! (2AFC accuracy, SROCC, PLCC, patch-averaged scoring).

pub mod archive;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod data;
pub mod dpis;
pub mod error;
pub mod evaluation;
pub mod fixture;
pub mod gradcheck;
pub mod head;
pub mod image;
pub mod metric;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod similarity;
pub mod swiniqa;
pub mod training;

pub use dpis::Dpis;
pub use error::{Error, Result};
pub use swiniqa::SwinIqa;
