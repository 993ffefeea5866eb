//! Multivariate long-term time-series forecasting built around a vanilla
//! Transformer encoder-decoder, extended with three trainable components:
//!
//! - adaptive univariate effect learning (`auel`): per-series output
//!   distribution via a learnable EMA mean, multi-window standard deviation
//!   and affine transform, plus mixture-of-experts horizon initialization;
//! - random dropping (`rd`): training-time masking of a random channel subset
//!   in both input and target, so the model learns subset-to-subset
//!   forecasting contributions;
//! - multi-kernel local smoothing (`mkls`): parallel depthwise convolutions
//!   fused by channel-wise attention, wrapped around the Transformer blocks.
//!
//! The compute layer is a small 64-bit reverse-mode autodiff tape
//! ([`tensor`]); training, evaluation, the Repeat baseline and the synthetic
//! `multi` dataset generator live in the top-level modules.

pub mod auel;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod mkls;
pub mod model;
pub mod moe;
pub mod params;
pub mod rd;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
