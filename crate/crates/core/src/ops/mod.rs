//! Layer primitives with their vector-Jacobian products.

mod conv;
mod elementwise;
pub mod gradcheck;
mod pool;

pub use conv::{
    check_conv_config, conv2d, conv2d_vjp, conv_out_extent, transposed_conv2d, transposed_conv2d_vjp, Conv2dParams,
};
pub use elementwise::{
    crop_spatial, crop_spatial_vjp, nearest_upsample2x, nearest_upsample2x_vjp, relu, relu_vjp, softmax_channels,
    softmax_channels_vjp,
};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use pool::{maxpool2x2, maxpool2x2_vjp, PoolIndices};
