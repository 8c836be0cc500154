//! Desk-scale expansion of curvilinear object segmentation datasets.
//!
//! The crate covers the full loop: a procedural toy corpus with per-sample
//! captions, a conditional diffusion generator with a semantic-map control
//! branch, caption recombination, semantic-map post-processing, the
//! three-step expansion pipeline, and a segmentation harness that measures
//! whether the expanded training set beats the original one.

pub mod captions;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod imageio;
pub mod nets;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod segeval;
pub mod segmap_post;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
