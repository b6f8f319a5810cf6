//! A miniature deep-learning toolkit built around *decomposed*
//! convolutional layers: a 2D convolution replaced by shared 1D
//! vertical filters, a pointwise nonlinearity, and 1D horizontal
//! filters.
//!
//! The crate provides:
//!
//! - dense NCHW tensors and exact forward/backward kernels for the
//!   primitive layers ([`tensor`], [`ops`], [`gradcheck`]);
//! - the decomposed layer itself ([`layers`]) and SVD-based conversion
//!   of 2D kernel banks into equivalent or truncated decomposed form
//!   ([`decompose`]);
//! - declarative model specs, structural transforms (per-layer
//!   decomposition, consecutive-layer fusion) and initialization
//!   ([`model`]);
//! - analytic parameter/multiply-accumulate accounting ([`complexity`]);
//! - an SGD training loop with plateau learning-rate scheduling and
//!   deterministic augmentation ([`train`]);
//! - dataset ingestion and weight serialization ([`data`], [`weights`]).
//!
//! The `decomposeme` binary ties these together; the `examples/`
//! directory holds one runnable example per capability.

pub mod complexity;
pub mod data;
pub mod decompose;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod net;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
