//! Backpropagation-free CNN training through adaptive spatial goodness
//! encoding (ASGE).
//!
//! Every convolutional layer is trained in isolation: its post-activation
//! feature maps are tiled into patches, each patch's mean squared activation
//! (its energy, or "goodness") is collected into a vector, and a frozen
//! random projection maps that vector to class logits. Descending the
//! layer-local cross-entropy gives the convolution its gradients directly;
//! nothing ever propagates across layer boundaries. The detach between
//! layers is what makes layer-pipelined training exactly equivalent to
//! sequential training.
//!
//! The crate ships:
//!
//! - the numeric substrate ([`tensor`]): convolution forward and weight
//!   gradient, ReLU, global average pooling, in `f32` for training and `f64`
//!   for gradient checking;
//! - goodness extraction with channel-aware patch partitioning
//!   ([`goodness`]);
//! - frozen random projection supervision and the hand-derived gradient
//!   chain ([`supervision`]);
//! - energy-preserving RMS pooling (plus avg/max for ablations) and
//!   affine-free layer normalization ([`layers`]);
//! - architecture specs, the layer stack, and three prediction strategies
//!   ([`network`]);
//! - IDX/CIFAR ingestion, deterministic splits, augmentation ([`data`]);
//! - optimizers, cosine schedule, sequential and pipelined training loops,
//!   binary checkpoints ([`trainer`]);
//! - a finite-difference gradient-check harness ([`gradcheck`]) and the
//!   config-driven command layer ([`cli`]).
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `asge` binary for the command-line front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod goodness;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod rng;
pub mod supervision;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ConvParams, Scalar, Tensor};
