use std::ops::Range;

use crate::attention::{attend, attention_mask};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lsm::{lsm_chunked_segments, ChunkOptions, GateSet, GateShape, LsmVars};
use crate::moe::moe_forward_var;
use crate::tensor::{Precision, Tensor};

use super::config::ModelConfig;
use super::packing::PackedBatch;
use super::params::{AttentionMixer, LsmMixer, Mixer, Model};

pub struct ForwardOutput<'t> {
    /// `len × vocab`.
    pub logits: Var<'t>,
    /// One load-balancing loss per block.
    pub aux_losses: Vec<Var<'t>>,
    /// Residual stream after each block.
    pub block_outputs: Vec<Var<'t>>,
}

pub fn rms_norm<'t>(x: Var<'t>, gain: Var<'t>, eps: f64) -> Result<Var<'t>> {
    x.rms_norm_rows(eps)?.mul(gain)
}

pub fn embed_tokens<'t>(model: &Model<Var<'t>>, tokens: &[usize], vocab: usize) -> Result<Var<'t>> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::invalid("model_forward", format!("token id {bad} outside vocabulary of {vocab}")));
    }
    model.embed.gather_rows(tokens)
}

/// Per-head LSM inputs for the rows of `h`.
pub fn lsm_head_vars<'t>(mixer: &LsmMixer<Var<'t>>, h: Var<'t>, cfg: &ModelConfig) -> Result<Vec<LsmVars<'t>>> {
    lsm_head_range_vars(mixer, h, cfg, 0..cfg.num_heads)
}

/// Like [`lsm_head_vars`] for a mixer holding only the columns (and static
/// gates) of global heads `heads`.
pub fn lsm_head_range_vars<'t>(
    mixer: &LsmMixer<Var<'t>>,
    h: Var<'t>,
    cfg: &ModelConfig,
    heads: Range<usize>,
) -> Result<Vec<LsmVars<'t>>> {
    let d = cfg.head_dim();
    let q = h.matmul(mixer.w_q)?;
    let k = h.matmul(mixer.w_k)?;
    let v = h.matmul(mixer.w_v)?;
    let layout = cfg.lsm.gate_layout();
    let shapes = [layout.decay, layout.decay_col, layout.rate, layout.step, layout.input, layout.transition];
    let mut projected: Vec<Option<Var<'t>>> = Vec::with_capacity(6);
    for ((_, w), (_, b)) in mixer.gate_w.fields().into_iter().zip(mixer.gate_b.fields()) {
        projected.push(match (w, b) {
            (Some(w), Some(b)) => Some(h.matmul(*w)?.add(*b)?),
            _ => None,
        });
    }
    let statics: Vec<Option<&Vec<Var<'t>>>> = mixer.statics.fields().into_iter().map(|(_, s)| s).collect();
    let first = heads.start;
    heads
        .map(|hd| {
            let local = hd - first;
            let mut g: [Option<Var<'t>>; 6] = [None; 6];
            for i in 0..6 {
                g[i] = match (shapes[i], projected[i], statics[i]) {
                    (Some(GateShape::PerToken(w)), Some(p), _) => Some(p.slice_cols(local * w, (local + 1) * w)?),
                    (Some(GateShape::Static(..)), _, Some(s)) => Some(s[local]),
                    _ => None,
                };
            }
            let [decay, decay_col, rate, step, input, transition] = g;
            let gates = GateSet { decay, decay_col, rate, step, input, transition };
            let cols = |x: Var<'t>| x.slice_cols(local * d, (local + 1) * d);
            Ok(LsmVars::new(cols(q)?, cols(k)?, cols(v)?, gates))
        })
        .collect()
}

/// `(q, k, v)` per head.
pub fn attention_head_vars<'t>(
    mixer: &AttentionMixer<Var<'t>>,
    h: Var<'t>,
    cfg: &ModelConfig,
) -> Result<Vec<(Var<'t>, Var<'t>, Var<'t>)>> {
    let d = cfg.head_dim();
    let q = h.matmul(mixer.w_q)?;
    let k = h.matmul(mixer.w_k)?;
    let v = h.matmul(mixer.w_v)?;
    (0..cfg.num_heads)
        .map(|hd| {
            let c = |x: Var<'t>| x.slice_cols(hd * d, (hd + 1) * d);
            Ok((c(q)?, c(k)?, c(v)?))
        })
        .collect()
}

/// Concatenates head outputs and applies the output projection.
pub fn merge_heads<'t>(tape: &'t Tape, heads: &[Var<'t>], w_o: Var<'t>) -> Result<Var<'t>> {
    let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(heads)? };
    o.matmul(w_o)
}

pub fn output_logits<'t>(model: &Model<Var<'t>>, x: Var<'t>, cfg: &ModelConfig) -> Result<Var<'t>> {
    let x = rms_norm(x, model.norm_final, cfg.norm_eps)?;
    match model.head {
        Some(h) => x.matmul(h),
        None => x.matmul(model.embed.t()?),
    }
}

fn lsm_mixer_forward<'t>(
    tape: &'t Tape,
    mixer: &LsmMixer<Var<'t>>,
    h: Var<'t>,
    cfg: &ModelConfig,
    packed: &PackedBatch,
) -> Result<Var<'t>> {
    let opts = ChunkOptions::new(cfg.chunk_size);
    let heads = lsm_head_vars(mixer, h, cfg)?;
    let outs = heads
        .iter()
        .enumerate()
        .map(|(hd, x)| Ok(lsm_chunked_segments(tape, x, &cfg.head_spec(hd), &opts, None, packed.resets())?.0))
        .collect::<Result<Vec<_>>>()?;
    merge_heads(tape, &outs, mixer.w_o)
}

fn attention_mixer_forward<'t>(
    tape: &'t Tape,
    mixer: &AttentionMixer<Var<'t>>,
    h: Var<'t>,
    cfg: &ModelConfig,
    packed: &PackedBatch,
) -> Result<Var<'t>> {
    let mask = attention_mask(0, packed.len(), &packed.doc_ids(), true);
    let outs = attention_head_vars(mixer, h, cfg)?
        .into_iter()
        .map(|(q, k, v)| attend(q, k, v, &mask))
        .collect::<Result<Vec<_>>>()?;
    merge_heads(tape, &outs, mixer.w_o)
}

/// Forward over a packed batch: state and attention restart at every
/// document boundary.
pub fn model_forward_var<'t>(
    tape: &'t Tape,
    model: &Model<Var<'t>>,
    cfg: &ModelConfig,
    packed: &PackedBatch,
) -> Result<ForwardOutput<'t>> {
    cfg.validate()?;
    let moe_cfg = cfg.moe();
    let mut x = embed_tokens(model, &packed.tokens, cfg.vocab_size)?;
    let mut aux_losses = Vec::with_capacity(model.blocks.len());
    let mut block_outputs = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let h = rms_norm(x, block.norm_mixer, cfg.norm_eps)?;
        let mixed = match &block.mixer {
            Mixer::Lsm(m) => lsm_mixer_forward(tape, m, h, cfg, packed)?,
            Mixer::Attention(m) => attention_mixer_forward(tape, m, h, cfg, packed)?,
        };
        x = x.add(mixed)?;
        let h = rms_norm(x, block.norm_moe, cfg.norm_eps)?;
        let moe = moe_forward_var(tape, h, &block.moe, &moe_cfg)?;
        x = x.add(moe.y)?;
        aux_losses.push(moe.aux_loss);
        block_outputs.push(x);
    }
    Ok(ForwardOutput { logits: output_logits(model, x, cfg)?, aux_losses, block_outputs })
}

/// Binds every parameter of `model` to `tape`.
pub fn bind_model<'t>(tape: &'t Tape, model: &Model<Tensor>, track: bool) -> Result<Model<Var<'t>>> {
    model.try_map(&mut |t| Ok(tape.var(t.clone(), track)))
}

/// Logits at 64-bit without tracking gradients.
pub fn model_forward(model: &Model<Tensor>, cfg: &ModelConfig, packed: &PackedBatch) -> Result<Tensor> {
    let tape = Tape::with_precision(Precision::F64);
    let bound = bind_model(&tape, model, false)?;
    let out = model_forward_var(&tape, &bound, cfg, packed)?;
    let logits = (*out.logits.value()).clone();
    Ok(logits)
}

pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub ce: Var<'t>,
    pub aux: Option<Var<'t>>,
}

/// Mean cross-entropy over labelled positions plus `aux_weight` times the
/// mean of `aux_losses`.
pub fn lm_loss<'t>(
    logits: Var<'t>,
    labels: &[Option<usize>],
    aux_losses: &[Var<'t>],
    aux_weight: f64,
) -> Result<LossParts<'t>> {
    let (n, vocab) = logits.value().dims2()?;
    if labels.len() != n {
        return Err(Error::shape("lm_loss", &[n, vocab], &[labels.len()]));
    }
    let (rows, targets): (Vec<usize>, Vec<usize>) =
        labels.iter().enumerate().filter_map(|(i, l)| l.map(|t| (i, t))).unzip();
    if rows.is_empty() {
        return Err(Error::invalid("lm_loss", "no labelled positions"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
        return Err(Error::invalid("lm_loss", format!("label {bad} outside vocabulary of {vocab}")));
    }
    let ce = logits.gather_rows(&rows)?.log_softmax_rows()?.gather_cols(&targets, 1)?.mean()?.neg()?;
    let aux = match aux_losses {
        [] => None,
        [first, rest @ ..] => {
            let mut s = *first;
            for a in rest {
                s = s.add(*a)?;
            }
            Some(s.scale(1.0 / aux_losses.len() as f64)?)
        }
    };
    let total = match aux {
        Some(a) if aux_weight != 0.0 => ce.add(a.scale(aux_weight)?)?,
        _ => ce,
    };
    Ok(LossParts { total, ce, aux })
}
