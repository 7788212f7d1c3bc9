//! Layer primitives sufficient for ResNet-50 and MobileNetV1 inference.
//!
//! Every function here is pure: inputs are borrowed, a fresh tensor is
//! returned.

mod activation;
mod conv;
mod norm;
mod pool;

pub use activation::{add, fully_connected, relu, softmax, softmax_rows};
pub(crate) use activation::relu_in_place;
pub use conv::{conv2d, depthwise_conv2d, ConvParams};
pub use norm::{batchnorm_infer, fold_batchnorm, BatchNormParams};
pub use pool::{global_avg_pool, pool2d, PoolMode};
