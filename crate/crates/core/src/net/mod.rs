//! A small 2.5D U-Net built from scratch: per-slice 2D convolutions, depth
//! pooling between encoder stages, 3D convolutions, pixel shuffle, scSE
//! attention and a dilated multi-scale fusion block.
//!
//! The widths are toy-sized. There are no pretrained backbones here; the
//! network exists to exercise the heatmap pipeline end to end on CPU.

pub mod blocks;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod tensor;

use thiserror::Error;

use crate::volgrid::VolumeError;

pub use blocks::{
    conv2d_per_slice, conv3d, depth_pool, fusion_block, pixel_shuffle_hw, scse_block, ConvWeights,
    DepthPoolMode, FusionParams, ScseParams,
};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use gradcheck::{check_directional, check_param_gradients, GradCheckReport};
pub use kernels::ConvSpec;
pub use model::{Downsample, ForwardPass, Gradients, Net, NetConfig, Variant};
pub use tensor::Tensor4;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("channel mismatch: expected {expected} input channels, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("depth halving needs an even depth, got {0}")]
    OddDepth(usize),
    #[error("{channels} channels are not divisible by {factor}²")]
    IndivisibleChannels { channels: usize, factor: usize },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("backward called without a cached forward pass")]
    MissingForwardCache,
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}
