//! Layers, the Adam optimizer and the taped kernels they are built from.

mod adam;
mod functional;
mod layers;

pub use adam::{Adam, ADAM_LR};
pub use functional::{conv2d, pool2d, upsample_nearest, PoolKind};
pub use layers::{
    BatchNorm2d, BnMode, BnOutput, Conv2d, Dense, InstanceNorm2d, Param, BN_ALPHA, BN_EPS,
};
