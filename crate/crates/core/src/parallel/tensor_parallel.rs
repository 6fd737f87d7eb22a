use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lsm::{lsm_chunked_var, ChunkOptions, GateSet};
use crate::model::{lsm_head_range_vars, merge_heads, LsmMixer, ModelConfig};
use crate::tensor::Tensor;

use super::group::{CommKind, RankGroup};

#[derive(Clone, Debug, Serialize)]
pub struct TpReport {
    pub shards: usize,
    /// Max-abs difference between sharded and unsharded outputs.
    pub max_abs_dev: f64,
    /// Elements entering the output all-reduce, summed over shards.
    pub allreduce_elements: usize,
}

/// The slice of `mixer` owned by shard `s` of `t`: Q/K/V and per-token gate
/// projections split by columns, the output projection by rows, and static
/// gates by head.
pub fn tp_shard_mixer(mixer: &LsmMixer<Tensor>, cfg: &ModelConfig, s: usize, t: usize) -> Result<LsmMixer<Tensor>> {
    if t == 0 || cfg.num_heads % t != 0 || cfg.hidden % t != 0 {
        return Err(Error::Config(format!(
            "{} heads / hidden {} do not split over {t} shards",
            cfg.num_heads, cfg.hidden
        )));
    }
    let hs = cfg.num_heads / t;
    let d = cfg.head_dim();
    let (c0, c1) = (s * hs * d, (s + 1) * hs * d);
    // Gate projections are head-contiguous, so an even column split is a
    // split by head.
    let split_gate = |g: &GateSet<Tensor>| {
        g.map(|w| {
            let c = w.cols() / t;
            w.slice_cols(s * c, (s + 1) * c)
        })
    };
    Ok(LsmMixer {
        w_q: mixer.w_q.slice_cols(c0, c1)?,
        w_k: mixer.w_k.slice_cols(c0, c1)?,
        w_v: mixer.w_v.slice_cols(c0, c1)?,
        w_o: mixer.w_o.slice_rows(c0, c1)?,
        gate_w: split_gate(&mixer.gate_w)?,
        gate_b: split_gate(&mixer.gate_b)?,
        statics: mixer.statics.map(|heads| Ok::<_, Error>(heads[s * hs..(s + 1) * hs].to_vec()))?,
    })
}

fn mixer_output<'t>(
    tape: &'t Tape,
    mixer: &LsmMixer<Tensor>,
    cfg: &ModelConfig,
    x: &Tensor,
    heads: std::ops::Range<usize>,
) -> Result<Var<'t>> {
    let bound = mixer.try_map(&mut |t| Ok(tape.constant(t.clone())))?;
    let h = tape.constant(x.clone());
    let opts = ChunkOptions::new(cfg.chunk_size);
    let first = heads.start;
    let vars = lsm_head_range_vars(&bound, h, cfg, heads)?;
    let outs = vars
        .iter()
        .enumerate()
        .map(|(i, v)| Ok(lsm_chunked_var(tape, v, &cfg.head_spec(first + i), &opts, None)?.0))
        .collect::<Result<Vec<_>>>()?;
    merge_heads(tape, &outs, bound.w_o)
}

/// Runs one LSM mixer on `x` both whole and split over `t` shards, reduced
/// by an all-reduce, and reports the deviation.
pub fn tp_shard_check(mixer: &LsmMixer<Tensor>, cfg: &ModelConfig, x: &Tensor, t: usize) -> Result<TpReport> {
    cfg.validate()?;
    let tape = Tape::new();
    let full = mixer_output(&tape, mixer, cfg, x, 0..cfg.num_heads)?;
    let mut group = RankGroup::new(t)?;
    let hs = cfg.num_heads / t.max(1);
    let shards = (0..t).map(|s| tp_shard_mixer(mixer, cfg, s, t)).collect::<Result<Vec<_>>>()?;
    let mut mb = group.mailbox(CommKind::AllReduce, "tp.out", None);
    for s in group.order() {
        mb.post(s, mixer_output(&tape, &shards[s], cfg, x, s * hs..(s + 1) * hs)?)?;
    }
    let reduced = group.all_reduce(&tape, mb)?;
    Ok(TpReport {
        shards: t,
        max_abs_dev: reduced.value().max_abs_diff(&full.value())?,
        allreduce_elements: group.comm_log().iter().map(|r| r.elements).sum(),
    })
}
