//! Convolutional, normalization and dense layers of the encoder/decoder path.

pub mod functional;
mod layers;

pub use layers::{
    BatchNorm, Conv1x1, ConvBlock, DwsConv, LayerNorm, Linear, TransposedConv, BN_EPS, BN_MOMENTUM, LN_EPS,
};

/// Whether batch norm uses batch statistics (and queues running-stat updates)
/// or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
