//! Variable-length volume classification: a ViT slice encoder feeding a
//! transformer aggregator whose learnable positional embeddings are
//! linearly resampled to the number of slices at hand.

pub mod aggregator;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod slice_encoder;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
