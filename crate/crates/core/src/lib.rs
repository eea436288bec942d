//! Stack-based 2D U-Net segmentation of volumes with a slice-regularised Dice
//! energy, bidirectional ConvLSTM refinement and multi-view fusion.

pub mod biclstm;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod unet;
pub mod volume;

pub use error::{Error, Result};
pub use loss::{LossWeights, StackLossValue};
pub use tensor::Tensor;
pub use volume::{Volume, VolumeKind};
