//! Pixel-wise sparse graph reasoning for image segmentation.
//!
//! Every pixel of a decoder feature map becomes a graph node. The nodes a
//! coarse prediction is least certain about are connected to the neighbors
//! that carry the most information for them, and a higher-order GNN layer
//! propagates features along those edges plus the local pixel grid. The
//! result is added back onto the feature map.
//!
//! Modules:
//! - [`tensor`], [`rng`], [`pstn`]: storage, seeded randomness, file format
//! - [`graph`]: similarity, normalization, information scores, pruning
//! - [`reason`]: the GNN layer and the full reasoning module
//! - [`autograd`]: reverse-mode differentiation and gradient checking
//! - [`nn`]: toy encoder-decoder, losses, optimizer and training loop
//! - [`data`], [`metrics`]: synthetic lesion images and evaluation
//! - [`experiment`]: ratio sweeps and the dense-vs-sparse benchmark

pub mod error;
pub mod graph;
pub mod pstn;
pub mod rng;
pub mod tensor;
pub mod autograd;
pub mod reason;
pub mod metrics;
pub mod data;
pub mod nn;
pub mod experiment;

pub use error::{PsgrError, Result};
pub use tensor::{DType, Scalar, Tensor};
