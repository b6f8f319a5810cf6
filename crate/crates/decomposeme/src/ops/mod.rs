//! Forward and backward kernels of every primitive layer.

pub(crate) mod kernels;

mod activation;
mod batchnorm;
mod conv;
mod linear;
mod loss;
mod pool;

pub use activation::{relu, relu_backward, tanh, tanh_backward};
pub use batchnorm::{batchnorm, batchnorm_backward, BatchNormState, BnCache, BnMode};
pub use conv::{conv2d, conv2d_backward, KernelBank2D};
pub(crate) use conv::{conv2d_backward_geom, conv2d_geom, ConvGeom};
pub use linear::{linear, linear_backward};
pub use loss::softmax_cross_entropy;
pub use pool::{
    global_avg_pool, global_avg_pool_backward, maxpool, maxpool_backward, MaxPoolIndices,
};
