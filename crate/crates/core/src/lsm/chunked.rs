//! Chunkwise evaluation on the autodiff tape.
//!
//! Each instance is first rewritten into one of three canonical forms:
//! a row-wise log-decay (`Diagonal`), a per-column log-decay (`Full`), or a
//! state-dependent projection (`Projection`). Diagonal and Full chunks use
//! an intra-chunk decay-weighted score plus the carried state; Projection
//! chunks step token by token and hand their state to the next chunk.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::recurrent::{LsmInputs, MemoryState, NORMALIZER_FLOOR};
use super::spec::{FeatureMap, GateSet, GateShape, Instance, LsmSpec};

/// One head's inputs as tape variables. Shapes as in [`LsmInputs`].
#[derive(Clone, Copy, Debug)]
pub struct LsmVars<'t> {
    pub q: Var<'t>,
    pub k: Var<'t>,
    pub v: Var<'t>,
    pub decay: Option<Var<'t>>,
    pub decay_col: Option<Var<'t>>,
    pub rate: Option<Var<'t>>,
    pub step: Option<Var<'t>>,
    pub input: Option<Var<'t>>,
    pub transition: Option<Var<'t>>,
}

impl<'t> LsmVars<'t> {
    pub fn new(q: Var<'t>, k: Var<'t>, v: Var<'t>, gates: GateSet<Var<'t>>) -> Self {
        Self {
            q,
            k,
            v,
            decay: gates.decay,
            decay_col: gates.decay_col,
            rate: gates.rate,
            step: gates.step,
            input: gates.input,
            transition: gates.transition,
        }
    }

    /// Binds plain inputs to `tape`, tracked or not.
    pub fn bind(tape: &'t Tape, inputs: &LsmInputs, track: bool) -> Self {
        let b = |t: &Tensor| tape.var(t.clone(), track);
        let g = inputs.gates.map(|t| Ok::<_, Error>(b(t))).expect("infallible");
        Self::new(b(&inputs.q), b(&inputs.k), b(&inputs.v), g)
    }

    pub fn len(&self) -> usize {
        self.q.value().rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gates(&self) -> GateSet<Var<'t>> {
        GateSet {
            decay: self.decay,
            decay_col: self.decay_col,
            rate: self.rate,
            step: self.step,
            input: self.input,
            transition: self.transition,
        }
    }

    /// Rows `start..end`; static gates are shared.
    pub fn slice(&self, start: usize, end: usize, spec: &LsmSpec) -> Result<Self> {
        let layout = spec.gate_layout();
        let cut = |v: Option<Var<'t>>, s: Option<GateShape>| -> Result<Option<Var<'t>>> {
            match (v, s) {
                (Some(v), Some(GateShape::PerToken(_))) => Ok(Some(v.slice_rows(start, end)?)),
                (v, _) => Ok(v),
            }
        };
        Ok(Self {
            q: self.q.slice_rows(start, end)?,
            k: self.k.slice_rows(start, end)?,
            v: self.v.slice_rows(start, end)?,
            decay: cut(self.decay, layout.decay)?,
            decay_col: cut(self.decay_col, layout.decay_col)?,
            rate: cut(self.rate, layout.rate)?,
            step: cut(self.step, layout.step)?,
            input: cut(self.input, layout.input)?,
            transition: cut(self.transition, layout.transition)?,
        })
    }
}

/// Test-only corruption of the chunked path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Applies the carried state with the decay product up to `t − 1`
    /// instead of `t`.
    ChunkDecayOffByOne,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkOptions {
    pub chunk: usize,
    pub fault: Option<Fault>,
}

impl ChunkOptions {
    pub fn new(chunk: usize) -> Self {
        Self { chunk, fault: None }
    }
}

pub(crate) enum ProjDecay<'t> {
    None,
    /// `N × 1`.
    Scalar(Var<'t>),
    /// `N × d_k`.
    Rows(Var<'t>),
}

pub(crate) enum Canonical<'t> {
    Diagonal {
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        log_decay: Option<Var<'t>>,
    },
    Full {
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        /// Per value column `j`, the `N × d_k` log-decay of column `j` of M.
        col_logs: Vec<Var<'t>>,
    },
    Projection {
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        decay: ProjDecay<'t>,
        erase: Var<'t>,
        write: Var<'t>,
    },
}

fn need<'t>(g: Option<Var<'t>>, name: &str, inst: Instance) -> Result<Var<'t>> {
    g.ok_or_else(|| Error::invalid("lsm_forward_chunked", format!("{inst}: missing gate `{name}`")))
}

fn apply_feature<'t>(x: Var<'t>, fm: FeatureMap) -> Result<Var<'t>> {
    match fm {
        FeatureMap::Identity => Ok(x),
        FeatureMap::EluPlusOne => x.elu_plus_one(),
        FeatureMap::Squared => x.square(),
    }
}

fn log_sigmoid(x: Var<'_>) -> Result<Var<'_>> {
    x.neg()?.softplus()?.neg()
}

/// `N×1 → N×width` by repeating the column.
fn widen<'t>(tape: &'t Tape, col: Var<'t>, width: usize) -> Result<Var<'t>> {
    let n = col.value().rows();
    tape.constant(Tensor::ones(&[n, width])).scale_rows(col)
}

/// `1×width → N×width` by repeating the row.
fn tile<'t>(tape: &'t Tape, row: Var<'t>, n: usize) -> Result<Var<'t>> {
    tape.constant(Tensor::ones(&[n, row.value().cols()])).mul(row)
}

pub(crate) fn canonicalize<'t>(tape: &'t Tape, x: &LsmVars<'t>, spec: &LsmSpec) -> Result<Canonical<'t>> {
    let inst = spec.instance;
    let (n, dk, dv) = (x.len(), spec.d_k, spec.d_v);
    let q = apply_feature(x.q, spec.feature_map)?;
    let k = apply_feature(x.k, spec.feature_map)?;
    let v = if spec.use_normalizer {
        tape.concat_cols(&[x.v, tape.constant(Tensor::ones(&[n, 1]))])?
    } else {
        x.v
    };
    let diag = |k, l| Ok(Canonical::Diagonal { q, k, v, log_decay: l });
    match inst {
        Instance::Bla | Instance::Rebased => diag(k, None),
        Instance::ScalarDecay(_) => {
            let a = spec.scalar_decay.unwrap_or(1.0);
            diag(k, Some(tape.constant(Tensor::full(&[n, dk], a.ln()))))
        }
        Instance::Gla => diag(k, Some(log_sigmoid(need(x.decay, "decay", inst)?)?)),
        Instance::Rwkv6 => diag(k, Some(need(x.decay, "decay", inst)?.exp()?.neg()?)),
        Instance::Hgrn2 => {
            let g = need(x.decay, "decay", inst)?;
            // 1 − σ(x) = σ(−x)
            diag(g.neg()?.sigmoid()?, Some(log_sigmoid(g)?))
        }
        Instance::Mamba2 => {
            let delta = need(x.rate, "rate", inst)?.softplus()?;
            let a = need(x.transition, "transition", inst)?.exp()?;
            let l = widen(tape, delta.mul(a)?.neg()?, dk)?;
            diag(k.scale_rows(delta)?, Some(l))
        }
        Instance::OuterGate(_) => {
            let row = log_sigmoid(need(x.decay, "decay", inst)?)?;
            let col = log_sigmoid(need(x.decay_col, "decay_col", inst)?)?;
            let col_logs = (0..dv)
                .map(|j| row.add(widen(tape, col.slice_cols(j, j + 1)?, dk)?))
                .collect::<Result<_>>()?;
            Ok(Canonical::Full { q, k, v, col_logs })
        }
        Instance::S4 | Instance::Mamba => {
            let a = need(x.transition, "transition", inst)?.exp()?;
            let (delta, key) = if inst == Instance::S4 {
                let d = tile(tape, need(x.step, "step", inst)?.softplus()?, n)?;
                let b = need(x.input, "input", inst)?;
                (d, d.mul(b)?)
            } else {
                let d = need(x.decay, "decay", inst)?.softplus()?;
                (d, d.mul(k)?)
            };
            let col_logs = (0..dv)
                .map(|j| delta.mul(a.slice_cols(j, j + 1)?.t()?)?.neg())
                .collect::<Result<_>>()?;
            Ok(Canonical::Full { q, k: key, v, col_logs })
        }
        Instance::DeltaNet | Instance::GatedDeltaNet | Instance::Ttt | Instance::Titans | Instance::Rwkv7 => {
            let khat = k.l2_normalize_rows()?;
            let rate = need(x.rate, "rate", inst)?.sigmoid()?;
            let (decay, erase, write) = match inst {
                Instance::DeltaNet => (ProjDecay::None, need(x.decay, "decay", inst)?.sigmoid()?, rate),
                Instance::GatedDeltaNet => {
                    let a = need(x.decay, "decay", inst)?.sigmoid()?;
                    (ProjDecay::Scalar(a), a, rate)
                }
                Instance::Titans => (ProjDecay::Scalar(need(x.decay, "decay", inst)?.sigmoid()?), rate, rate),
                Instance::Rwkv7 => (ProjDecay::Rows(need(x.decay, "decay", inst)?.exp()?.neg()?.exp()?), rate, rate),
                _ => (ProjDecay::None, rate, rate),
            };
            Ok(Canonical::Projection { q, k: khat, v, decay, erase, write })
        }
    }
}

/// One diagonal-decay chunk from carried state `m` (`d_k × w`).
fn diagonal_chunk<'t>(
    tape: &'t Tape,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    log_decay: Option<Var<'t>>,
    m: Var<'t>,
    fault: Option<Fault>,
) -> Result<(Var<'t>, Var<'t>)> {
    let c = q.value().rows();
    match log_decay {
        None => {
            let scores = q.matmul(k.t()?)?.mul(tape.constant(causal_mask(c)))?;
            let out = scores.matmul(v)?.add(q.matmul(m)?)?;
            Ok((out, m.add(k.t()?.matmul(v)?)?))
        }
        Some(l) => {
            let cum = l.cumsum_rows()?;
            let last = cum.row(c - 1)?;
            let intra = tape.decay_scores(q, k, cum)?.matmul(v)?;
            let carried = match fault {
                Some(Fault::ChunkDecayOffByOne) => cum.sub(l)?,
                None => cum,
            };
            let inter = q.mul(carried.exp()?)?.matmul(m)?;
            let k_tail = k.mul(cum.neg()?.add(last)?.exp()?)?;
            let m_next = m.scale_rows(last.exp()?)?.add(k_tail.t()?.matmul(v)?)?;
            Ok((intra.add(inter)?, m_next))
        }
    }
}

fn projection_chunk<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    decay: &ProjDecay<'t>,
    erase: Var<'t>,
    write: Var<'t>,
    mut m: Var<'t>,
    offset: usize,
) -> Result<(Vec<Var<'t>>, Var<'t>)> {
    let c = q.value().rows();
    let mut outs = Vec::with_capacity(c);
    for t in 0..c {
        let kt = k.row(t)?;
        let km = kt.matmul(m)?;
        let mut next = match decay {
            ProjDecay::None => m,
            ProjDecay::Scalar(a) => m.mul(a.row(offset + t)?)?,
            ProjDecay::Rows(a) => m.scale_rows(a.row(offset + t)?)?,
        };
        next = next
            .sub(kt.outer(km)?.mul(erase.row(offset + t)?)?)?
            .add(kt.outer(v.row(t)?)?.mul(write.row(offset + t)?)?)?;
        m = next;
        outs.push(q.row(t)?.matmul(m)?);
    }
    Ok((outs, m))
}

fn finish<'t>(tape: &'t Tape, out: Var<'t>, spec: &LsmSpec) -> Result<Var<'t>> {
    if !spec.use_normalizer {
        return Ok(out);
    }
    let (n, dv) = (out.value().rows(), spec.d_v);
    let den = out.slice_cols(dv, dv + 1)?;
    if let Some(&bad) = den.value().data().iter().find(|d| d.abs() < NORMALIZER_FLOOR) {
        return Err(Error::DegenerateNormalizer { instance: spec.instance.name().into(), value: bad });
    }
    let inv = tape.constant(Tensor::ones(&[n, 1])).div(den)?;
    out.slice_cols(0, dv)?.scale_rows(inv)
}

/// Width of the carried state: `d_v`, plus one normalizer column.
pub fn state_width(spec: &LsmSpec) -> usize {
    spec.d_v + usize::from(spec.use_normalizer)
}

/// Chunked forward of one head on the tape.
///
/// `init` is the carried `d_k × state_width` state (zero when `None`).
/// Returns the `N × d_v` outputs and the final carried state.
pub fn lsm_chunked_var<'t>(
    tape: &'t Tape,
    x: &LsmVars<'t>,
    spec: &LsmSpec,
    opts: &ChunkOptions,
    init: Option<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    spec.validate()?;
    if opts.chunk == 0 {
        return Err(Error::invalid("lsm_forward_chunked", "chunk size must be at least 1"));
    }
    let n = x.len();
    if n == 0 {
        return Err(Error::invalid("lsm_forward_chunked", "empty sequence"));
    }
    let w = state_width(spec);
    let mut m = init.unwrap_or_else(|| tape.constant(Tensor::zeros(&[spec.d_k, w])));
    if m.value().dims2()? != (spec.d_k, w) {
        return Err(Error::shape("lsm_forward_chunked", &m.shape(), &[spec.d_k, w]));
    }
    let canon = canonicalize(tape, x, spec)?;
    let mut outs = Vec::with_capacity(n.div_ceil(opts.chunk));
    for start in (0..n).step_by(opts.chunk) {
        let end = (start + opts.chunk).min(n);
        let rows = |v: Var<'t>| v.slice_rows(start, end);
        match &canon {
            Canonical::Diagonal { q, k, v, log_decay } => {
                let l = log_decay.map(rows).transpose()?;
                let (o, next) = diagonal_chunk(tape, rows(*q)?, rows(*k)?, rows(*v)?, l, m, opts.fault)?;
                outs.push(o);
                m = next;
            }
            Canonical::Full { q, k, v, col_logs } => {
                let (qc, kc, vc) = (rows(*q)?, rows(*k)?, rows(*v)?);
                let mut cols = Vec::with_capacity(col_logs.len());
                let mut states = Vec::with_capacity(col_logs.len());
                for (j, l) in col_logs.iter().enumerate() {
                    let (o, s) = diagonal_chunk(
                        tape,
                        qc,
                        kc,
                        vc.slice_cols(j, j + 1)?,
                        Some(rows(*l)?),
                        m.slice_cols(j, j + 1)?,
                        opts.fault,
                    )?;
                    cols.push(o);
                    states.push(s);
                }
                outs.push(tape.concat_cols(&cols)?);
                m = tape.concat_cols(&states)?;
            }
            Canonical::Projection { q, k, v, decay, erase, write } => {
                let (o, next) = projection_chunk(rows(*q)?, rows(*k)?, rows(*v)?, decay, *erase, *write, m, start)?;
                outs.extend(o);
                m = next;
            }
        }
    }
    let out = if outs.len() == 1 { outs[0] } else { tape.concat_rows(&outs)? };
    if !m.value().all_finite() {
        return Err(Error::NonFiniteState { instance: spec.instance.name().into() });
    }
    Ok((finish(tape, out, spec)?, m))
}

/// Non-causal readout `φ(Q)·M` against a fixed state, normalized when
/// enabled. Only decay-free instances have this form.
pub fn lsm_readout<'t>(tape: &'t Tape, x: &LsmVars<'t>, spec: &LsmSpec, m: Var<'t>) -> Result<Var<'t>> {
    if !spec.instance.is_decay_free() {
        return Err(Error::invalid("lsm_readout", format!("{} has no non-causal form", spec.instance)));
    }
    let q = apply_feature(x.q, spec.feature_map)?;
    finish(tape, q.matmul(m)?, spec)
}

/// Like [`lsm_chunked_var`], restarting from the zero state at every offset
/// in `resets` (offsets are relative to `x`; `0` is ignored).
pub fn lsm_chunked_segments<'t>(
    tape: &'t Tape,
    x: &LsmVars<'t>,
    spec: &LsmSpec,
    opts: &ChunkOptions,
    init: Option<Var<'t>>,
    resets: &[usize],
) -> Result<(Var<'t>, Var<'t>)> {
    let n = x.len();
    let mut cuts: Vec<usize> = resets.iter().copied().filter(|&r| r > 0 && r < n).collect();
    cuts.sort_unstable();
    cuts.dedup();
    if cuts.is_empty() {
        return lsm_chunked_var(tape, x, spec, opts, init);
    }
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(n);
    let mut outs = Vec::with_capacity(bounds.len() - 1);
    let mut state = init;
    for (i, pair) in bounds.windows(2).enumerate() {
        let seg = x.slice(pair[0], pair[1], spec)?;
        let (o, s) = lsm_chunked_var(tape, &seg, spec, opts, if i == 0 { state } else { None })?;
        outs.push(o);
        state = Some(s);
    }
    Ok((tape.concat_rows(&outs)?, state.expect("at least one segment")))
}

/// How a chunk maps its incoming state into its outgoing one:
/// `M_out = transfer(M_in) + U`, with `U` the chunk's state from zero.
#[derive(Clone, Copy, Debug)]
pub enum Transfer<'t> {
    Identity,
    /// `diag(r)·M`, `r` is `1 × d_k`.
    RowScale(Var<'t>),
    /// `H ⊙ M`, `H` is `d_k × d_v`.
    Hadamard(Var<'t>),
    /// `P·M`, `P` is `d_k × d_k`.
    Left(Var<'t>),
    /// The chunk contains a document start; incoming state is discarded.
    Reset,
}

impl<'t> Transfer<'t> {
    pub fn apply(&self, tape: &'t Tape, m: Var<'t>) -> Result<Var<'t>> {
        match *self {
            Transfer::Identity => Ok(m),
            Transfer::RowScale(r) => m.scale_rows(r),
            Transfer::Hadamard(h) => m.mul(h),
            Transfer::Left(p) => p.matmul(m),
            Transfer::Reset => Ok(tape.constant(Tensor::zeros(&m.shape()))),
        }
    }

    /// Payload as one flat row for communication; `None` when nothing needs
    /// to be sent.
    pub fn payload(&self) -> Result<Option<Var<'t>>> {
        match *self {
            Transfer::Identity | Transfer::Reset => Ok(None),
            Transfer::RowScale(v) | Transfer::Hadamard(v) | Transfer::Left(v) => {
                let n = v.value().numel();
                Ok(Some(v.reshape(&[1, n])?))
            }
        }
    }

    /// Same kind as `self` with its payload replaced by `flat`.
    pub fn with_payload(&self, flat: Var<'t>) -> Result<Self> {
        Ok(match *self {
            Transfer::Identity => Transfer::Identity,
            Transfer::Reset => Transfer::Reset,
            Transfer::RowScale(v) => Transfer::RowScale(flat.reshape(&v.shape())?),
            Transfer::Hadamard(v) => Transfer::Hadamard(flat.reshape(&v.shape())?),
            Transfer::Left(v) => Transfer::Left(flat.reshape(&v.shape())?),
        })
    }
}

/// The map from a sequence's incoming state to its outgoing state, ignoring
/// the additive part. `resets` as in [`lsm_chunked_segments`].
pub fn state_transfer<'t>(tape: &'t Tape, x: &LsmVars<'t>, spec: &LsmSpec, resets: &[usize]) -> Result<Transfer<'t>> {
    if resets.iter().any(|&r| r > 0 && r < x.len()) {
        return Ok(Transfer::Reset);
    }
    let dk = spec.d_k;
    match canonicalize(tape, x, spec)? {
        Canonical::Diagonal { log_decay: None, .. } => Ok(Transfer::Identity),
        Canonical::Diagonal { log_decay: Some(l), .. } => Ok(Transfer::RowScale(l.sum_rows()?.exp()?)),
        Canonical::Full { col_logs, .. } => {
            let rows = col_logs.iter().map(|l| l.sum_rows()).collect::<Result<Vec<_>>>()?;
            Ok(Transfer::Hadamard(tape.concat_rows(&rows)?.t()?.exp()?))
        }
        Canonical::Projection { k, decay, erase, .. } => {
            let eye = tape.constant(Tensor::eye(dk));
            let mut p = eye;
            for t in 0..x.len() {
                let kt = k.row(t)?;
                let d = match &decay {
                    ProjDecay::None => eye,
                    ProjDecay::Scalar(a) => eye.mul(a.row(t)?)?,
                    ProjDecay::Rows(a) => eye.scale_rows(a.row(t)?)?,
                };
                let step = d.sub(kt.outer(kt)?.mul(erase.row(t)?)?)?;
                p = step.matmul(p)?;
            }
            Ok(Transfer::Left(p))
        }
    }
}

/// Chunked forward on plain tensors, optionally continuing from `init`.
pub fn lsm_forward_chunked_with(
    inputs: &LsmInputs,
    spec: &LsmSpec,
    opts: &ChunkOptions,
    init: Option<&MemoryState>,
) -> Result<(Tensor, MemoryState)> {
    inputs.validate(spec)?;
    let tape = Tape::new();
    let x = LsmVars::bind(&tape, inputs, false);
    let step = inputs.len() + init.map_or(0, |s| s.step);
    let init = init.map(|s| tape.constant(s.augmented()));
    let (out, m) = lsm_chunked_var(&tape, &x, spec, opts, init)?;
    let out = (*out.value()).clone();
    let m = m.value();
    Ok((out, MemoryState::from_augmented(&m, spec, step)?))
}

pub fn lsm_forward_chunked(inputs: &LsmInputs, spec: &LsmSpec, chunk: usize) -> Result<Tensor> {
    Ok(lsm_forward_chunked_with(inputs, spec, &ChunkOptions::new(chunk), None)?.0)
}

/// Multiplicative causal mask: `Ψ_ij = 1` for `i ≥ j`, else 0.
pub fn causal_mask(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            t.data_mut()[i * n + j] = 1.0;
        }
    }
    t
}
