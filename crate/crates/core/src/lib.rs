//! Leaf/wood semantic segmentation of terrestrial laser scanning point clouds.
//!
//! This crate is the allocation-only algorithmic core. It carries no IO and
//! no threading; the `leafwood` companion crate layers file formats, the
//! sample store, parallel inference and the command line on top of it.
//!
//! The pipeline, end to end:
//!
//! 1. [`preprocess`]: noise filtering, cloth-simulation ground removal,
//!    rank normalisation of reflectance and two-scale voxel tiling with
//!    reflectance-weighted downsampling into [`preprocess::Sample`]s.
//! 2. [`model`]: a set-abstraction encoder with per-stage reflectance gates
//!    and inverted residual blocks, a feature propagation decoder and a
//!    sigmoid head, built on the small reverse-mode engine in [`ndiff`].
//! 3. [`train`]: focal loss, augmentation and the AdamW / one-cycle loop.
//! 4. [`infer`]: per-sample prediction and k-nearest-neighbour vote
//!    consolidation back onto the source cloud.
//! 5. [`metrics`]: balanced accuracy and friends, plus path-length weighted
//!    balanced accuracy computed from [`spatial::shortest_path_lengths`].
//!
//! [`synth`] generates labelled forests with known skeletons for testing.
#![no_std]

extern crate alloc;

pub mod cloud;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod ndiff;
pub mod preprocess;
pub mod rng;
pub mod spatial;
pub mod synth;
pub mod train;

pub use cloud::{ClassLabel, PointCloud};
pub use error::{Error, Result};
