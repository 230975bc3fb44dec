//! Indoor localization from four-view image features: a small
//! reverse-mode autodiff engine, view-graph message passing, floor-plan
//! embeddings, zero-shot compatibility scoring, synthetic data and metrics.

pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evalmetrics;
pub mod floorplan;
pub mod gln;
pub mod map2vec;
pub mod numerics;
pub mod zeroshot;

pub use error::{GlnError, Result};
