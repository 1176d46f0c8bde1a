//! 1xN block pruning for convolutional and fully-connected layers.
//!
//! The pipeline: load a model ([`model_io`]), optionally rearrange filters by
//! l1 norm ([`rearrange`]), select and apply masks ([`pattern`], [`prune`]),
//! encode pruned layers as BSR ([`bsr`]) and run them with the block-wise
//! kernel ([`exec`]). [`bench`] and [`report`] measure and summarize.

pub mod bench;
pub mod bsr;
pub mod error;
pub mod exec;
pub mod model;
pub mod model_io;
pub mod pattern;
pub mod prune;
pub mod rearrange;
pub mod report;

pub use error::{Error, Result};
pub use model::{LayerKind, LayerRecord, ModelGraph, WeightTensor};
