//! Stacked LSM / attention blocks with MoE feed-forward layers.

mod checkpoint;
mod config;
mod forward;
mod packing;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{LayerKind, LayerPattern, ModelConfig};
pub use forward::{
    attention_head_vars, bind_model, embed_tokens, lm_loss, lsm_head_range_vars, lsm_head_vars, merge_heads, model_forward,
    model_forward_var, output_logits, rms_norm, ForwardOutput, LossParts,
};
pub use packing::{pack_sequences, PackedBatch};
pub use params::{build_model, AttentionMixer, Block, LsmMixer, Mixer, Model};
