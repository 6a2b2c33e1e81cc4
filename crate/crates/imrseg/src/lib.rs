//! Weakly supervised few-shot semantic segmentation at desk scale.
//!
//! Given one or a few support images that share a class with a query image,
//! and only the class *name* as supervision, the pipeline:
//!
//! 1. derives coarse foreground masks for every image from a joint
//!    image/text embedding provider (dense cosine similarity or Grad-CAM);
//! 2. correlates query and masked support features into a fused 4D
//!    hypercorrelation volume;
//! 3. refines support and query masks together for a fixed number of steps
//!    with a convolutional gated recurrent cell and a small prediction head.
//!
//! Everything runs on f64 CPU tensors with a built-in reverse-mode autodiff
//! tape, so training, evaluation and gradient verification need no external
//! ML runtime. A deterministic toy embedding provider and a synthetic
//! shapes dataset make the full loop trainable and testable in minutes.

pub mod autodiff;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod palette;
pub mod tensorfile;

pub use error::{Error, Result};
