//! Architecture descriptors and the trainable gated network.

mod descriptor;
mod gated;
mod network;

pub use descriptor::{
    toy_descriptor, wav2vec2_base_descriptor, ArchDescriptor, ConvLayerSpec, PositionalConvSpec,
    TransformerLayerSpec,
};
pub use gated::{gated_forward, GateMode, GatedModel};
pub use network::{accuracy, cross_entropy, AttentionHead, ConvBlock, EncoderLayer, GateValues, Network};
