use std::ops::Range;

use crate::attention::{attend, attention_mask};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lsm::{lsm_chunked_segments, lsm_chunked_var, lsm_readout, state_transfer, ChunkOptions, LsmSpec, LsmVars, Transfer};
use crate::tensor::Tensor;

use super::group::{CommKind, RankGroup};

/// Contiguous split of a length-`len` sequence over ranks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkedSequence {
    pub len: usize,
    pub ranges: Vec<Range<usize>>,
}

impl ChunkedSequence {
    /// Sizes differ by at most one; earlier ranks take the extra tokens.
    pub fn split(len: usize, ranks: usize) -> Result<Self> {
        if ranks == 0 || len < ranks {
            return Err(Error::invalid("chunk_sequence", format!("cannot split {len} tokens over {ranks} ranks")));
        }
        let (base, extra) = (len / ranks, len % ranks);
        let mut start = 0;
        let ranges = (0..ranks)
            .map(|r| {
                let n = base + usize::from(r < extra);
                let range = start..start + n;
                start += n;
                range
            })
            .collect();
        Ok(Self { len, ranges })
    }

    /// Like [`split`](Self::split) but insists on equal sizes.
    pub fn equal(len: usize, ranks: usize) -> Result<Self> {
        if ranks == 0 || len % ranks != 0 {
            return Err(Error::invalid("chunk_sequence", format!("{len} tokens do not split evenly over {ranks} ranks")));
        }
        Self::split(len, ranks)
    }

    pub fn ranks(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_equal(&self) -> bool {
        self.ranges.iter().all(|r| r.len() == self.ranges[0].len())
    }

    /// Row blocks of `x`, one per rank.
    pub fn rows<'t>(&self, x: Var<'t>) -> Result<Vec<Var<'t>>> {
        self.ranges.iter().map(|r| x.slice_rows(r.start, r.end)).collect()
    }

    pub fn lsm_vars<'t>(&self, x: &LsmVars<'t>, spec: &LsmSpec) -> Result<Vec<LsmVars<'t>>> {
        self.ranges.iter().map(|r| x.slice(r.start, r.end, spec)).collect()
    }

    /// Document starts strictly inside rank `r`'s range, rebased to it.
    pub fn local_resets(&self, r: usize, boundaries: &[usize]) -> Vec<usize> {
        let range = &self.ranges[r];
        boundaries.iter().filter(|&&b| b > range.start && b < range.end).map(|b| b - range.start).collect()
    }

    /// Rank `r` begins a new document, so it carries nothing in.
    pub fn starts_document(&self, r: usize, boundaries: &[usize]) -> bool {
        let s = self.ranges[r].start;
        s == 0 || boundaries.contains(&s)
    }

    /// Rank `r` discards whatever reaches it before passing state on.
    pub fn cuts_state(&self, r: usize, boundaries: &[usize]) -> bool {
        let range = &self.ranges[r];
        boundaries.iter().any(|&b| b > 0 && b >= range.start && b < range.end)
    }
}

/// One rank's contribution to the state prefix: its chunk's state from
/// zero and the map its chunk applies to incoming state.
#[derive(Clone, Copy, Debug)]
pub struct StateShare<'t> {
    pub state: Var<'t>,
    pub transfer: Transfer<'t>,
}

fn pack<'t>(tape: &'t Tape, shares: &[StateShare<'t>]) -> Result<Var<'t>> {
    let mut parts = Vec::with_capacity(2 * shares.len());
    for s in shares {
        parts.push(s.state.reshape(&[1, s.state.value().numel()])?);
        if let Some(p) = s.transfer.payload()? {
            parts.push(p);
        }
    }
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat_cols(&parts)
    }
}

fn unpack<'t>(flat: Var<'t>, like: &[StateShare<'t>]) -> Result<Vec<StateShare<'t>>> {
    let mut at = 0;
    let mut take = |n: usize| {
        let v = flat.slice_cols(at, at + n);
        at += n;
        v
    };
    like.iter()
        .map(|s| {
            let shape = s.state.shape();
            let state = take(s.state.value().numel())?.reshape(&shape)?;
            let transfer = match s.transfer.payload()? {
                Some(p) => s.transfer.with_payload(take(p.value().numel())?)?,
                None => s.transfer,
            };
            Ok(StateShare { state, transfer })
        })
        .collect()
}

/// Exclusive prefix of memory states across ranks through a single
/// all-gather.
///
/// `shares[r]` holds one entry per lane (e.g. per head); all ranks must
/// agree on lane shapes and transfer kinds. Rank `r` receives, per lane,
/// `S_r` with `S_0 = 0` and `S_{r+1} = transfer_r(S_r) + state_r`, or just
/// `state_r` when `cuts[r]`.
pub fn prefix_states<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    site: &str,
    layer: Option<usize>,
    shares: &[Vec<StateShare<'t>>],
    cuts: &[bool],
) -> Result<Vec<Vec<Var<'t>>>> {
    let t = group.size();
    if shares.len() != t || cuts.len() != t {
        return Err(Error::Comm {
            kind: CommKind::AllGather.name(),
            site: site.into(),
            msg: format!("expected {t} contributions, got {}", shares.len()),
        });
    }
    let gathered = group.all_gather_with(site, layer, |r| pack(tape, &shares[r]))?;
    let like = &shares[0];
    let mut carried: Vec<Var<'t>> =
        like.iter().map(|s| tape.constant(Tensor::zeros(&s.state.shape()))).collect();
    let mut out = Vec::with_capacity(t);
    for (r, flat) in gathered.into_iter().enumerate() {
        out.push(carried.clone());
        let received = unpack(flat, like)?;
        carried = received
            .iter()
            .zip(&carried)
            .map(|(s, m)| if cuts[r] { Ok(s.state) } else { s.transfer.apply(tape, *m)?.add(s.state) })
            .collect::<Result<_>>()?;
    }
    Ok(out)
}

/// Rank `r` receives `Σ_{i<r} M_i`.
pub fn prefix_sum_states<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    site: &str,
    states: &[Var<'t>],
) -> Result<Vec<Var<'t>>> {
    let shares: Vec<Vec<StateShare<'t>>> =
        states.iter().map(|&state| vec![StateShare { state, transfer: Transfer::Identity }]).collect();
    let cuts = vec![false; states.len()];
    Ok(prefix_states(group, tape, site, None, &shares, &cuts)?.into_iter().map(|mut v| v.remove(0)).collect())
}

/// Rank `r` receives `Σ_{i<r} diag(Π_{i<j<r} a_j)·M_i`, where `decays[j]`
/// (`1 × d_k`) is chunk `j`'s cumulative row decay.
pub fn prefix_sum_states_decayed<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    site: &str,
    states: &[Var<'t>],
    decays: &[Var<'t>],
) -> Result<Vec<Var<'t>>> {
    if decays.len() != states.len() {
        return Err(Error::invalid("prefix_sum_states", "one decay per state required"));
    }
    let shares: Vec<Vec<StateShare<'t>>> = states
        .iter()
        .zip(decays)
        .map(|(&state, &d)| vec![StateShare { state, transfer: Transfer::RowScale(d) }])
        .collect();
    let cuts = vec![false; states.len()];
    Ok(prefix_states(group, tape, site, None, &shares, &cuts)?.into_iter().map(|mut v| v.remove(0)).collect())
}

/// Non-causal SP for decay-free instances: every rank sums all chunk
/// states and reads its queries out against the total.
pub fn sp_forward_nomask<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    chunks: &[LsmVars<'t>],
    spec: &LsmSpec,
) -> Result<Vec<Var<'t>>> {
    if !spec.instance.is_decay_free() {
        return Err(Error::invalid("sp_forward_nomask", format!("{} has decay; use the masked variant", spec.instance)));
    }
    check_ranks(group, chunks.len(), "sp_forward_nomask")?;
    let states = group.run(|r| {
        let opts = ChunkOptions::new(chunks[r].len());
        Ok(lsm_chunked_var(tape, &chunks[r], spec, &opts, None)?.1)
    })?;
    let gathered = group.all_gather_with("lsm.state", None, |r| {
        let s = states[r];
        s.reshape(&[1, s.value().numel()])
    })?;
    let shape = states[0].shape();
    let mut total = tape.constant(Tensor::zeros(&[1, states[0].value().numel()]));
    for g in &gathered {
        total = total.add(*g)?;
    }
    let total = total.reshape(&shape)?;
    group.run(|r| lsm_readout(tape, &chunks[r], spec, total))
}

fn check_ranks(group: &RankGroup, n: usize, op: &'static str) -> Result<()> {
    if n != group.size() {
        return Err(Error::invalid(op, format!("{n} chunks for a group of {} ranks", group.size())));
    }
    Ok(())
}

/// Causal SP over several heads sharing one sequence split, with a single
/// state all-gather for all heads.
///
/// `chunks[r][h]` is head `h` on rank `r`; `boundaries` are global document
/// starts (state restarts there). Returns `out[r][h]`.
#[allow(clippy::too_many_arguments)]
pub fn sp_lsm_heads<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    site: &str,
    layer: Option<usize>,
    seq: &ChunkedSequence,
    chunks: &[Vec<LsmVars<'t>>],
    specs: &[LsmSpec],
    opts: &ChunkOptions,
    boundaries: &[usize],
) -> Result<Vec<Vec<Var<'t>>>> {
    check_ranks(group, chunks.len(), "sp_forward_masked")?;
    check_ranks(group, seq.ranks(), "sp_forward_masked")?;
    if chunks.iter().any(|c| c.len() != specs.len()) {
        return Err(Error::invalid("sp_forward_masked", "every rank needs one chunk per head spec"));
    }
    let shares = group.run(|r| {
        let resets = seq.local_resets(r, boundaries);
        chunks[r]
            .iter()
            .zip(specs)
            .map(|(x, spec)| {
                let (_, state) = lsm_chunked_segments(tape, x, spec, opts, None, &resets)?;
                // The receiving side learns about cuts from the shared
                // boundaries, so the uncut transfer keeps payloads uniform.
                let transfer = state_transfer(tape, x, spec, &[])?;
                Ok(StateShare { state, transfer })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let cuts: Vec<bool> = (0..group.size()).map(|r| seq.cuts_state(r, boundaries)).collect();
    let prefix = prefix_states(group, tape, site, layer, &shares, &cuts)?;
    group.run(|r| {
        let resets = seq.local_resets(r, boundaries);
        let fresh = seq.starts_document(r, boundaries);
        chunks[r]
            .iter()
            .zip(specs)
            .zip(&prefix[r])
            .map(|((x, spec), &m)| {
                let init = (!fresh).then_some(m);
                Ok(lsm_chunked_segments(tape, x, spec, opts, init, &resets)?.0)
            })
            .collect()
    })
}

/// Causal SP for one head: local chunked forward continued from the
/// exclusive prefix of the other ranks' states.
pub fn sp_forward_masked<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    seq: &ChunkedSequence,
    chunks: &[LsmVars<'t>],
    spec: &LsmSpec,
    opts: &ChunkOptions,
    boundaries: &[usize],
) -> Result<Vec<Var<'t>>> {
    let per_rank: Vec<Vec<LsmVars<'t>>> = chunks.iter().map(|c| vec![*c]).collect();
    let out = sp_lsm_heads(group, tape, "lsm.state", None, seq, &per_rank, std::slice::from_ref(spec), opts, boundaries)?;
    Ok(out.into_iter().map(|mut h| h.remove(0)).collect())
}

/// Causal softmax attention under SP for `heads` heads of width
/// `cols / heads`: K and V are all-gathered, queries stay local.
///
/// `doc_ids` covers the whole sequence; attention never crosses documents.
#[allow(clippy::too_many_arguments)]
pub fn sp_attention_heads<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    site: &str,
    layer: Option<usize>,
    seq: &ChunkedSequence,
    qkv: &[(Var<'t>, Var<'t>, Var<'t>)],
    heads: usize,
    doc_ids: &[usize],
) -> Result<Vec<Vec<Var<'t>>>> {
    check_ranks(group, qkv.len(), "sp_attention_allgather")?;
    if !seq.is_equal() {
        return Err(Error::invalid("sp_attention_allgather", "attention SP needs equal chunks"));
    }
    if doc_ids.len() != seq.len {
        return Err(Error::invalid("sp_attention_allgather", "one document id per position required"));
    }
    let k_all = group.all_gather_with(format!("{site}.k"), layer, |r| Ok(qkv[r].1))?;
    let v_all = group.all_gather_with(format!("{site}.v"), layer, |r| Ok(qkv[r].2))?;
    let k = tape.concat_rows(&k_all)?;
    let v = tape.concat_rows(&v_all)?;
    let d = k.value().cols() / heads;
    group.run(|r| {
        let range = &seq.ranges[r];
        let mask = attention_mask(range.start, range.len(), doc_ids, true);
        (0..heads)
            .map(|h| {
                let c = |x: Var<'t>| x.slice_cols(h * d, (h + 1) * d);
                attend(c(qkv[r].0)?, c(k)?, c(v)?, &mask)
            })
            .collect()
    })
}

/// Single-head causal attention under SP.
pub fn sp_attention_allgather<'t>(
    group: &mut RankGroup,
    tape: &'t Tape,
    seq: &ChunkedSequence,
    qkv: &[(Var<'t>, Var<'t>, Var<'t>)],
) -> Result<Vec<Var<'t>>> {
    let doc_ids = vec![0; seq.len];
    let out = sp_attention_heads(group, tape, "attn", None, seq, qkv, 1, &doc_ids)?;
    Ok(out.into_iter().map(|mut h| h.remove(0)).collect())
}
