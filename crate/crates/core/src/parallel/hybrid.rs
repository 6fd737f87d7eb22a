use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::lsm::{ChunkOptions, LsmSpec};
use crate::model::{
    embed_tokens, lsm_head_vars, merge_heads, output_logits, rms_norm, ForwardOutput, Mixer, Model, ModelConfig,
    PackedBatch,
};
use crate::moe::moe_forward_var;

use super::group::RankGroup;
use super::sequence::{sp_attention_heads, sp_lsm_heads, ChunkedSequence};

/// Model forward with the sequence split over `group`: LSM blocks exchange
/// one packed state all-gather each, attention blocks all-gather K and V.
///
/// Returns each rank's logits for its own positions and its local
/// load-balancing losses.
pub fn hybrid_sp_forward<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    model: &Model<Var<'t>>,
    cfg: &ModelConfig,
    packed: &PackedBatch,
) -> Result<(ChunkedSequence, Vec<ForwardOutput<'t>>)> {
    cfg.validate()?;
    let seq = ChunkedSequence::equal(packed.len(), group.size())?;
    let moe_cfg = cfg.moe();
    let opts = ChunkOptions::new(cfg.chunk_size);
    let specs: Vec<LsmSpec> = (0..cfg.num_heads).map(|h| cfg.head_spec(h)).collect();
    let doc_ids = packed.doc_ids();
    let boundaries = packed.resets();

    let mut x = group.run(|r| {
        let range = seq.ranges[r].clone();
        embed_tokens(model, &packed.tokens[range], cfg.vocab_size)
    })?;
    let mut aux: Vec<Vec<Var<'t>>> = vec![Vec::with_capacity(model.blocks.len()); group.size()];
    let mut hidden: Vec<Vec<Var<'t>>> = vec![Vec::with_capacity(model.blocks.len()); group.size()];
    for (layer, block) in model.blocks.iter().enumerate() {
        let h = group.run(|r| rms_norm(x[r], block.norm_mixer, cfg.norm_eps))?;
        let mixed = match &block.mixer {
            Mixer::Lsm(m) => {
                let heads = group.run(|r| lsm_head_vars(m, h[r], cfg))?;
                let site = format!("layer{layer}.lsm.state");
                let outs = sp_lsm_heads(group, tape, &site, Some(layer), &seq, &heads, &specs, &opts, boundaries)?;
                group.run(|r| merge_heads(tape, &outs[r], m.w_o))?
            }
            Mixer::Attention(m) => {
                let qkv = group.run(|r| Ok((h[r].matmul(m.w_q)?, h[r].matmul(m.w_k)?, h[r].matmul(m.w_v)?)))?;
                let site = format!("layer{layer}.attn");
                let outs = sp_attention_heads(group, tape, &site, Some(layer), &seq, &qkv, cfg.num_heads, &doc_ids)?;
                group.run(|r| merge_heads(tape, &outs[r], m.w_o))?
            }
        };
        x = group.run(|r| {
            let y = x[r].add(mixed[r])?;
            let moe = moe_forward_var(tape, rms_norm(y, block.norm_moe, cfg.norm_eps)?, &block.moe, &moe_cfg)?;
            aux[r].push(moe.aux_loss);
            let out = y.add(moe.y)?;
            hidden[r].push(out);
            Ok(out)
        })?;
    }
    let outs = group.run(|r| {
        Ok(ForwardOutput {
            logits: output_logits(model, x[r], cfg)?,
            aux_losses: aux[r].clone(),
            block_outputs: hidden[r].clone(),
        })
    })?;
    Ok((seq, outs))
}
