//! Few-shot segmentation with local-aware agents.
//!
//! An episode provides a handful of labeled support images, optionally some
//! unlabeled images of the same class, and one query image to segment. The
//! pipeline mines a small set of agent vectors from the supports (masked
//! cross-attention split into equal-mass local regions by entropic optimal
//! transport), refines them against superpixel prototypes of the unlabeled
//! images (graph attention plus adaptive aggregation), aligns them with the
//! query through iterated pseudo-local masks, and finally matches every
//! query pixel against the agent that fits it best.
//!
//! Everything runs on a synthetic shape benchmark with an episodic training
//! harness, a gradient-checked autodiff core, and a CLI (`agmtr`).

pub mod aad;
pub mod ale;
pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod matching;
pub mod pipeline;
pub mod registry;
pub mod sad;
pub mod sinkhorn;
pub mod slic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{BinaryMask, Tensor};
