//! CBConv and the supporting layers of the LeNet backbone.
//!
//! Layers own their caches: a `backward` must follow the `forward` whose
//! activations it differentiates, on the same thread.

mod batchnorm;
mod cbconv;
mod dropout;
mod linear;
mod loss;
mod pool;
mod relu;

pub use batchnorm::BatchNorm;
pub use cbconv::CBConvLayer;
pub use dropout::Dropout;
pub use linear::Linear;
pub use loss::{softmax_xent, CenterLoss, CenterLossOutput};
pub use pool::MaxPool2x2;
pub use relu::Relu;

/// Whether layers use batch statistics and stochastic regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
