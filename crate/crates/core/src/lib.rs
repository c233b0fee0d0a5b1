//! Circulant binary convolutional networks.
//!
//! A learned `3x3` filter is expanded into `K` rotated copies (a circulant
//! filter, or CiF) by permuting the eight peripheral cells around the fixed
//! center. Both the expanded filters and the activations of every layer but
//! the first are binarized with `sign`, and the back-propagated gradient of
//! the `K` orientations is rotated back and summed onto the single learned
//! filter.
//!
//! The crate is `no_std` with `alloc`. The `std` feature (on by default)
//! only enables runtime CPU feature detection in the GEMM backend.
//!
//! Module map:
//!
//! - [`tensor`]: dense rank-4 `f64` tensors and a reference cross-correlation.
//! - [`circulant`]: ring permutations, CiF expansion and the gradient fold.
//! - [`binarize`]: `sign`, the Gaussian straight-through gradient, bit
//!   packing and the XNOR/popcount convolution.
//! - [`layers`]: CBConv plus the supporting LeNet layers and losses.
//! - [`model`]: the four-stage LeNet backbone.
//! - [`optim`], [`train`]: SGD with momentum and the epoch loop.
//! - [`data`]: image sets, IDX parsing and rotation augmentation.
//! - [`inference`]: packed 1-bit inference model.
//! - [`gradcheck`]: finite-difference and adjointness verification.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod binarize;
pub mod circulant;
pub mod data;
mod error;
mod gemm;
pub mod gradcheck;
pub mod inference;
pub mod layers;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use binarize::{PackedBitTensor, SignFn, SignSurrogate};
pub use circulant::{CiF, CirculantSpec, LearnedFilter};
pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor4};
