//! Fractal next-scale autoregressive depth generation with per-scale
//! conditional diffusion, plus robust multi-sample consensus fusion.
//!
//! The crate is `no_std` and only needs `alloc`. Everything here is pure
//! computation; file formats, checkpoints, and the command line live in the
//! `fadn` companion crate.
//!
//! Module map:
//! - [`grid`], [`plan`], [`resample`], [`normalize`], [`patches`], [`rng`]:
//!   shared data types and the deterministic randomness contract.
//! - [`diffusion`]: noise schedule, forward noising, loss, reverse sampler.
//! - [`nnet`]: the MLP noise predictor with hand-derived gradients, AdamW and
//!   the warmup/cosine learning-rate schedule.
//! - [`vcfr`]: image features and the per-scale visual/depth condition.
//! - [`fractal`]: the coarse-to-fine generator (training and generation).
//! - [`urca`]: affine alignment, robust per-pixel consensus, uncertainty.
//! - [`bench`]: synthetic scenes, depth metrics, cost accounting.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bench;
pub mod diffusion;
mod error;
pub mod fractal;
pub mod grid;
mod math;
pub mod nnet;
pub mod normalize;
pub mod patches;
pub mod plan;
pub mod resample;
pub mod rng;
pub mod urca;
pub mod vcfr;

pub use error::{Error, Result};
pub use grid::{DepthMap, ImageRGB, LatentGrid};
pub use plan::{ScaleConfig, SchedulePlan};
pub use rng::{RngPath, RngStream};
