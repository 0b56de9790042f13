//! Ordinal multi-class image classification via ranking decompositions.
//!
//! An N-class ordinal task is split into N-1 binary "is the label >= k"
//! sub-models (a ranking bank). Class activation maps from a trained bank
//! are distance-weighted, fused into a z-normalized region-of-interest
//! channel, concatenated onto the input, and used to train a second bank
//! that starts from the first bank's weights. Multi-class and merged
//! binary baselines, metrics, a synthetic ordinal dataset generator, and
//! binary artifact formats (checkpoints, ROI cache) live here too; the
//! `ornk` binary in the companion crate drives full experiments.

pub mod augment;
pub mod backbone;
pub mod cam;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod preprocess;
pub mod ranking;
pub mod rng;
pub mod roi_cache;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
