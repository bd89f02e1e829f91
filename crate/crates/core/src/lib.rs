//! TESL-Net: a depthwise-separable CNN encoder/decoder with shifted-window
//! transformer blocks in the encoder and bidirectional ConvLSTM skip fusion,
//! built on a small reverse-mode autodiff core.

pub mod error;
pub mod model;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub mod nn;
pub mod swin;
pub mod convlstm;
pub mod metrics;
pub mod data;
pub mod train;
pub mod verify;
