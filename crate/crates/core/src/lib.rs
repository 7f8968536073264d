//! Test-time augmentation (TTA) for volumetric multi-class segmentation.
//!
//! The crate samples spatial and intensity augmentations, runs a pluggable
//! [`predictor::Predictor`] on every augmented copy of the input, maps each
//! prediction back onto the original grid and fuses the results either by
//! per-voxel majority vote or by averaging class probabilities. The spread of
//! the per-sample hard labels gives a voxel-wise entropy map
//! ([`uncertainty::entropy_map`]). [`metrics`] scores label maps with Dice and
//! Hausdorff distances and summarizes cohorts.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod cli;
pub mod engine;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod geometry;
pub mod metrics;
pub mod predictor;
pub mod rng;
pub mod uncertainty;
pub mod volume;

pub use error::{Error, Result};
