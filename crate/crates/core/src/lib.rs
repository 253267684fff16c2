//! Attention-based multiple-instance learning over whole-slide feature bags.
//!
//! The crate covers the full path from raster tiles to statistics: tissue
//! segmentation and patch grids ([`tiler`]), the FBAG container and cohort
//! handling ([`bagio`]), gated-attention ABMIL / CLAM-SB models with exact
//! gradients ([`milnet`]), the training loop ([`trainer`]), bootstrap and
//! permutation-test evaluation ([`evalstat`]) and attention heatmaps
//! ([`heatmap`]).

pub mod bagio;
pub mod error;
pub mod evalstat;
pub mod heatmap;
pub mod milnet;
pub mod rng;
pub mod tiler;
pub mod trainer;

pub use error::{Error, Result};
