//! Network assembly, presets and weight files.

mod config;
mod net;
mod weights;

pub use config::{Preset, TeslNetConfig};
pub use net::{Activations, DecoderStage, EncoderStage, TeslLayers, TeslNet};
pub use weights::{
    load_weights, load_weights_file, parse_weights, save_weights, save_weights_file, WeightFile, WeightsError,
};
