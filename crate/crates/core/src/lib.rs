//! Training-trajectory attribution of catastrophic forgetting.
//!
//! `lethe-core` trains a small convolutional classifier through two-task
//! continual-learning sequences and attributes the change in the first task's
//! loss to individual parameters: the loss difference is a line integral of
//! the old-task gradient field along the new-task optimization trajectory, and
//! discretizing that integral step by step splits it into per-parameter
//! contributions that sum back (approximately) to the measured total.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`tape`]: dense f64 tensors and reverse-mode autodiff
//! - [`model`]: the fixed convolutional architecture and its parameter blocks
//! - [`optim`]: Adam / SGD steps that record exact per-step parameter deltas
//! - [`data`]: IDX dataset loading, scenario transforms, task sequences
//! - [`attribution`]: the per-parameter path-integral ledger
//! - [`report`]: per-layer aggregation, multi-run statistics, CSV/JSON/SVG

pub mod attribution;
pub mod data;
pub mod error;
pub mod figure;
pub mod model;
pub mod optim;
pub mod report;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{GradientTape, Gradients, ValueId};
pub use tensor::Tensor;
