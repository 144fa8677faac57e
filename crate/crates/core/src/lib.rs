//! Desk-scale video reasoning segmentation.
//!
//! The crate bundles three things: a synthetic moving-shapes benchmark with
//! inference-style queries, a small trainable model that answers those
//! queries with text plus spatio-temporal masks, and the evaluation stack
//! (region/boundary quality, tracklet AP/AR, multiple-choice accuracy).
//! All numerics are plain `f64` with hand-derived gradients; see
//! [`gradcheck`] for the checker that keeps them honest.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod context;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod formats;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod responder;
pub mod rle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
