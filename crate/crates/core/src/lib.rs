//! Geometry-aware token refinement for multi-frame depth and camera
//! estimation: K-NN graph attention over patch tokens, camera-token
//! conditioning, attention biases, a confidence-weighted depth objective,
//! image metrics, back-projection and a small trainable reference model.

pub mod conditioning;
pub mod degat;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod objective;

pub use error::{Error, Result};
