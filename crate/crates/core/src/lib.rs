//! Amodal instance mask completion for cluttered RGB-D scenes.
//!
//! The crate follows the pipeline a grasping system runs:
//!
//! * [`scene`]: domain types, a deterministic procedural scene generator and
//!   the on-disk dataset format.
//! * [`preprocess`]: cropping around the visible mask, normalization, mask
//!   augmentation and pasting predictions back into image coordinates.
//! * [`nn`] and [`model`]: a small tensor/layer library with hand-written
//!   backward passes and the two-stream completion network built on it.
//! * [`train`]: AdamW, the training loop and checkpoints.
//! * [`metrics`] and [`eval`]: matching, IoU, overlap/boundary P/R/F and
//!   occlusion scores over whole datasets.
//! * [`grasp`]: top-grasp point generation and grasp-region classification.
//!
//! Data-parallel loops go through [`exec::Execution`], which uses rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod grasp;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod preprocess;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
pub use mask::Mask;
