//! Encoder, decoders and classifier of the multi-view masked autoencoder.

mod config;
mod network;
mod params;

pub use config::ModelConfig;
pub use network::{attention_map_extract, AttentionKind, AttentionMap, DropPath, Forward, LN_EPS};
pub use params::{layer_id, no_decay, AnyTensor, Checkpoint, ModelParams, Part, INIT_STD};
