//! Layer primitives with explicit backward passes.
//!
//! Each layer records what its backward pass needs during `forward`; models
//! replay those records in reverse order. There is no general graph engine.

mod activation;
mod batchnorm;
mod checkpoint;
mod conv;
mod optim;
mod param;
mod pool;

pub use activation::{concat_channels, relu, sigmoid, sigmoid_scalar, split_channels, tanh, Relu, Sigmoid};
pub use batchnorm::{BatchNorm2d, Mode, BN_DECAY, BN_EPS};
pub use checkpoint::{Checkpoint, CheckpointEntry, FORMAT_VERSION};
pub use conv::{conv2d, deconv2d, Conv2d, Deconv2d};
pub(crate) use conv::{conv2d_backward, conv2d_forward, ConvTape};
pub use optim::{momentum_update, SgdMomentum};
pub use param::{Module, Param};
pub(crate) use param::join;
pub use pool::{maxpool2x2, maxpool2x2_backward, MaxPool2x2};
