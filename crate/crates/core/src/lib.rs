//! Multimodal concept-based incremental learner, desk scale.
//!
//! The crate trains a small transformer that fuses image-patch embeddings
//! with fixed textual concept anchors, classifies through parameter-free
//! alignment against class anchors, and evaluates concept retention across
//! a class-incremental experience stream.

pub mod error;
pub mod analysis;
pub mod anchors;
pub mod cbm;
pub mod ckpt;
pub mod continual;
pub mod encoder;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod syndata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
