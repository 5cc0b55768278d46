//! rustseg — weakly-supervised corrosion segmentation.
//!
//! Produces per-pixel corrosion masks from a classifier trained on nothing
//! but image-level labels. The pipeline has three stages:
//!
//! 1. **Classify** — a fixed-topology encoder CNN (two 3x3 valid
//!    convolutions per section, 2x2 max pools, one sigmoid neuron) decides
//!    whether the image contains corrosion at all.
//! 2. **Localise** — gradient-weighted class-activation mapping over the
//!    last convolutional layer turns that decision into a coarse heatmap;
//!    the improved variant with second/third-order weighting is the default.
//! 3. **Refine** — a dynamic threshold filter seeds either a dense-CRF
//!    mean-field refinement or the more aggressive K-means + erosion +
//!    short-CRF path, producing the full-resolution mask.
//!
//! The crate is a library first: see the `examples/` directory for one
//! runnable program per capability (dataset synthesis, training,
//! classification, heatmaps, refinement, evaluation, timing). A thin
//! `rustseg` binary exposes the same functionality as subcommands.
//!
//! No per-pixel labels are used anywhere in training; synthetic ground
//! truth exists only to score masks after the fact.

pub mod error;
pub mod imageio;
pub mod localize;
pub mod metrics;
pub mod model_io;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod synth;
pub mod tensor;

pub mod cli;

pub use error::{Error, Result};
pub use tensor::Tensor3;
