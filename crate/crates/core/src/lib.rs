//! Corruption-robust super-resolution.
//!
//! Heavy-tailed quasi-norm fidelity and manifold losses, a windowed SSIM
//! perceptual loss, adversarial training of a 4× generator, a corruption
//! injection pipeline for training sets, and the RRMSE / MS-mSSIM / QILV
//! evaluation metrics.

// `!(x >= 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
