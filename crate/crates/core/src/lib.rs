//! Multimodal (image + report) anomaly classification with gradient-based
//! explanations.
//!
//! - [`tensor`]: f64 tensors and the reverse-mode engine.
//! - [`text`]: tokenization, vocabulary, padding and skip-gram embeddings.
//! - [`synth`]: paired image/report cases with planted anomalies.
//! - [`model`]: text and image submodels, fusion classifier, training.
//! - [`attribution`]: integrated gradients and token importance.
//! - [`detection`]: sight-sensitivity thresholding, k-means, bounding circles.
//! - [`render`]: SVG overlays and token heatmaps.

pub mod attribution;
pub mod detection;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod render;
pub mod tensor;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
