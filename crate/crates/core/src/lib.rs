//! Semi-supervised semantic segmentation of LiDAR sweeps.
//!
//! Every stage of the pipeline lives here as pure computation over
//! in-memory data: synthetic scene generation, range-image projection,
//! region growing, sample rasterization, inter-frame association with
//! constraint generation, the annotation state machine, a small
//! convolutional classifier with hand-written backpropagation, the
//! supervised / constraint / semi-supervised losses and training loop,
//! and F-measure evaluation.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, the CLI and the
//! HTTP service live in the `semiseg` crate. Enable the `parallel`
//! feature to evaluate per-item gradients on a rayon pool; the reduction
//! order is fixed, so results are bit-identical either way.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod annotation;
pub mod class;
pub mod classifier;
pub mod evaluation;
pub mod geometry;
pub mod pipeline;
pub mod range;
pub mod sample;
pub mod scene;
pub mod segmentation;
pub mod tracking;
pub mod training;

mod math;
mod par;

pub use class::{ClassLabel, NUM_CLASSES};
pub use geometry::{Pose, Vec3};
