//! Restoration of 4D spherical-harmonic FOD images inside high-signal-loss
//! masks with an order-aware conditional diffusion model.
//!
//! The crate covers the full desk-scale pipeline: synthetic crossing-fiber
//! phantoms with parametric signal loss, bit-exact container formats, the
//! DDPM/v-prediction math, a conditional 3D U-Net denoiser with volume
//! encoding and frequency-balanced cross-attention, a deterministic
//! training loop, mask-spliced inference, and the evaluation metrics
//! (per-order RMSE, peak angular differences, FOD integrity, severity
//! grouping).

pub mod autograd;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod kvtext;
pub mod nn;
pub mod phantom;
pub mod restorer;
pub mod rng;
pub mod spharm;
pub mod sphere;
pub mod store;
pub mod trainer;

pub use error::{FodError, Result};
pub use spharm::{FodImage, PeakSet, ScaleTable, VolumeIndex};
