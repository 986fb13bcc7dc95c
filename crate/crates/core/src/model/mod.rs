//! Miniature MAE: patching, masks, encoder/decoder, optimizer, checkpoints.

mod checkpoint;
mod config;
mod mae;
mod mask;
mod optim;
mod patch;

pub use checkpoint::{Checkpoint, OptimizerState, Phase, PhaseRecord, FORMAT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use mae::{
    sincos_position_encoding, DecoderPass, DecoderTrace, EncoderPass, EncoderTrace, ForwardTrace, LayerTrace,
    LayerVars, Mae,
};
pub use mask::MaskSpec;
pub use optim::{decays, AdamW, AdamWConfig, CosineSchedule};
pub use patch::{normalize_patches, patchify, unpatchify, Image, Patches};
