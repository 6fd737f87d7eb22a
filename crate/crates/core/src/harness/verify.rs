use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, attention_mask, softmax_attention_parallel};
use crate::autodiff::gradcheck::check_gradients;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lsm::{
    lsm_chunked_var, lsm_forward_chunked_with, lsm_forward_sequential, ChunkOptions, Fault, FeatureMap, GateSet,
    Instance, LsmInputs, LsmSpec, LsmVars,
};
use crate::model::{
    bind_model, build_model, lm_loss, model_forward, model_forward_var, pack_sequences, LayerPattern, Mixer, Model,
    ModelConfig,
};
use crate::moe::{moe_forward, moe_forward_dense, moe_forward_var, route, MoeConfig, MoeLayer};
use crate::parallel::{
    hybrid_sp_forward, sp_attention_allgather, sp_forward_masked, sp_forward_nomask, tp_shard_check, ChunkedSequence,
    CommKind, RankGroup, Schedule,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    /// Chunked against sequential kernels for every instance.
    Kernels,
    /// Sequence-parallel rank invariance, including the hybrid model.
    Sp,
    Tp,
    Moe,
    Grad,
    /// Packed batches against per-document runs.
    Packing,
    /// Communication volume read from the collective log.
    Comm,
}

impl Suite {
    pub const ALL: [Suite; 7] = [Suite::Kernels, Suite::Sp, Suite::Tp, Suite::Moe, Suite::Grad, Suite::Packing, Suite::Comm];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Kernels => "kernels",
            Suite::Sp => "sp",
            Suite::Tp => "tp",
            Suite::Moe => "moe",
            Suite::Grad => "grad",
            Suite::Packing => "packing",
            Suite::Comm => "comm",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
            Error::Config(format!("unknown suite `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Measured deviation or count.
    pub value: f64,
    /// Upper bound on `value`; exact checks use 0 with `value` the
    /// absolute difference.
    pub tolerance: f64,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, passed: value.is_finite() && value < tolerance, error: None }
    }

    fn exact(name: impl Into<String>, got: usize, want: usize) -> Self {
        let value = got.abs_diff(want) as f64;
        Self { name: name.into(), value, tolerance: 0.0, passed: got == want, error: None }
    }

    fn zero(name: impl Into<String>, value: f64) -> Self {
        Self { name: name.into(), value, tolerance: 0.0, passed: value == 0.0, error: None }
    }

    fn truth(name: impl Into<String>, ok: bool) -> Self {
        Self { name: name.into(), value: f64::from(u8::from(!ok)), tolerance: 0.0, passed: ok, error: None }
    }

    fn failed(name: impl Into<String>, e: Error) -> Self {
        Self { name: name.into(), value: f64::NAN, tolerance: 0.0, passed: false, error: Some(e.to_string()) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub suites: Vec<SuiteReport>,
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Empty runs every suite.
    pub only: Vec<Suite>,
    /// Corrupts the chunked kernels of the `kernels` suite.
    pub fault: Option<Fault>,
}

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    let suites: Vec<Suite> = if opts.only.is_empty() { Suite::ALL.to_vec() } else { opts.only.clone() };
    let suites: Vec<SuiteReport> = suites.into_iter().map(|s| run_suite(s, opts.fault)).collect();
    VerifyReport { passed: suites.iter().all(|s| s.passed), suites }
}

pub fn run_suite(suite: Suite, fault: Option<Fault>) -> SuiteReport {
    let started = Instant::now();
    let mut checks = Vec::new();
    match suite {
        Suite::Kernels => kernels(&mut checks, fault),
        Suite::Sp => sp(&mut checks),
        Suite::Tp => tp(&mut checks),
        Suite::Moe => moe(&mut checks),
        Suite::Grad => grad(&mut checks),
        Suite::Packing => packing(&mut checks),
        Suite::Comm => comm(&mut checks),
    }
    SuiteReport { suite, passed: checks.iter().all(|c| c.passed), seconds: started.elapsed().as_secs_f64(), checks }
}

/// Runs `f`, turning an error into a failed check.
fn guard(checks: &mut Vec<Check>, name: String, f: impl FnOnce() -> Result<Vec<Check>>) {
    match f() {
        Ok(cs) => checks.extend(cs),
        Err(e) => checks.push(Check::failed(name, e)),
    }
}

fn joined(vs: &[Var<'_>]) -> Result<Tensor> {
    Tensor::concat_rows(&vs.iter().map(|v| (*v.value()).clone()).collect::<Vec<_>>())
}

fn kernels(checks: &mut Vec<Check>, fault: Option<Fault>) {
    let mut rng = Rng::seed(101);
    for inst in Instance::ALL {
        for d in [4, 8] {
            let spec = LsmSpec::new(inst, d, d);
            guard(checks, format!("{inst} d={d}"), || {
                let mut worst: f64 = 0.0;
                for n in [7, 32, 64] {
                    let x = LsmInputs::random(&spec, n, &mut rng);
                    let want = lsm_forward_sequential(&x, &spec)?;
                    for c in [1, 3, 8, n] {
                        let (got, _) = lsm_forward_chunked_with(&x, &spec, &ChunkOptions { chunk: c, fault }, None)?;
                        worst = worst.max(got.max_abs_diff(&want)?);
                    }
                }
                Ok(vec![Check::below(format!("chunked vs sequential {inst} d={d}"), worst, 1e-10)])
            });
        }
    }
}

/// Unmasked linear attention `φ(Q)φ(K)ᵀV`, row-normalized when `norm`.
fn nomask_direct(x: &LsmInputs, fm: FeatureMap, norm: bool) -> Result<Tensor> {
    let phi = |t: &Tensor| t.map(|v| fm.apply_scalar(v));
    let (q, k) = (phi(&x.q), phi(&x.k));
    let n = x.len();
    let scores = q.matmul(&k.transpose()?)?;
    let mut out = scores.matmul(&x.v)?;
    if norm {
        let den = scores.matmul(&Tensor::ones(&[n, 1]))?;
        let cols = out.cols();
        for i in 0..n {
            for j in 0..cols {
                out.data_mut()[i * cols + j] /= den.data()[i];
            }
        }
    }
    Ok(out)
}

fn sp(checks: &mut Vec<Check>) {
    const RANKS: [usize; 4] = [1, 2, 4, 8];
    let mut rng = Rng::seed(202);
    for (fm, norm) in [(FeatureMap::Identity, false), (FeatureMap::EluPlusOne, true)] {
        let spec = LsmSpec::new(Instance::Bla, 4, 4).with_feature_map(fm).with_normalizer(norm);
        let x = LsmInputs::random(&spec, 32, &mut rng);
        guard(checks, format!("nomask normalizer={norm}"), || {
            let want = nomask_direct(&x, fm, norm)?;
            let mut outs = Vec::new();
            for t in RANKS {
                let tape = Tape::new();
                let seq = ChunkedSequence::split(x.len(), t)?;
                let mut g = RankGroup::new(t)?.with_schedule(Schedule::Shuffled(t as u64));
                let chunks = seq.lsm_vars(&LsmVars::bind(&tape, &x, false), &spec)?;
                outs.push(joined(&sp_forward_nomask(&mut g, &tape, &chunks, &spec)?)?);
            }
            let mut cs = Vec::new();
            for (t, o) in RANKS.iter().zip(&outs) {
                cs.push(Check::below(format!("nomask normalizer={norm} T={t} vs T=1"), o.max_abs_diff(&outs[0])?, 1e-10));
                cs.push(Check::below(format!("nomask normalizer={norm} T={t} vs direct"), o.max_abs_diff(&want)?, 1e-10));
            }
            Ok(cs)
        });
    }
    for inst in Instance::ALL {
        let spec = LsmSpec::new(inst, 4, 4);
        let x = LsmInputs::random(&spec, 29, &mut rng);
        guard(checks, format!("masked {inst}"), || {
            let want = lsm_forward_sequential(&x, &spec)?;
            let mut outs = Vec::new();
            for t in RANKS {
                let tape = Tape::new();
                let seq = ChunkedSequence::split(x.len(), t)?;
                let mut g = RankGroup::new(t)?.with_schedule(Schedule::Reversed);
                let chunks = seq.lsm_vars(&LsmVars::bind(&tape, &x, false), &spec)?;
                outs.push(joined(&sp_forward_masked(&mut g, &tape, &seq, &chunks, &spec, &ChunkOptions::new(3), &[])?)?);
            }
            let inv = outs.iter().map(|o| o.max_abs_diff(&outs[0])).collect::<Result<Vec<_>>>()?;
            let orc = outs.iter().map(|o| o.max_abs_diff(&want)).collect::<Result<Vec<_>>>()?;
            Ok(vec![
                Check::below(format!("masked {inst} rank invariance"), inv.into_iter().fold(0.0, f64::max), 1e-10),
                Check::below(format!("masked {inst} vs sequential"), orc.into_iter().fold(0.0, f64::max), 1e-10),
            ])
        });
    }
    for (pattern, inst) in [("LNLN", Instance::Gla), ("LNLN", Instance::Bla), ("LNLN", Instance::Mamba2)] {
        guard(checks, format!("hybrid {pattern} {inst}"), || {
            let mut cfg = ModelConfig::new(8, 8, 2, pattern.parse()?, inst).with_vocab(16).with_experts(4, 2);
            cfg.chunk_size = 4;
            let mut rng = Rng::seed(7);
            let model = build_model(&cfg, &mut rng)?;
            let docs: Vec<Vec<usize>> = [9, 3, 12].iter().map(|&n| (0..n).map(|_| rng.below(16)).collect()).collect();
            let batch = pack_sequences(&docs)?;
            let want = model_forward(&model, &cfg, &batch)?;
            let mut cs = Vec::new();
            for t in [2, 4] {
                let tape = Tape::new();
                let bound = bind_model(&tape, &model, false)?;
                let mut g = RankGroup::new(t)?;
                let (_, outs) = hybrid_sp_forward(&mut g, &tape, &bound, &cfg, &batch)?;
                let logits: Vec<Var<'_>> = outs.iter().map(|o| o.logits).collect();
                cs.push(Check::below(format!("hybrid {pattern} {inst} T={t}"), joined(&logits)?.max_abs_diff(&want)?, 1e-9));
            }
            Ok(cs)
        });
    }
}

fn tp(checks: &mut Vec<Check>) {
    for inst in [Instance::Bla, Instance::Gla, Instance::DeltaNet, Instance::Mamba2, Instance::ScalarDecay(crate::lsm::ScalarPreset::RetNet)] {
        guard(checks, format!("tp {inst}"), || {
            let mut cfg = ModelConfig::new(8, 8, 4, LayerPattern::pure(1), inst).with_vocab(8);
            cfg.chunk_size = 4;
            let mut rng = Rng::seed(303);
            let model = build_model(&cfg, &mut rng)?;
            let Mixer::Lsm(m) = &model.blocks[0].mixer else {
                return Err(Error::invalid("verify", "expected an LSM mixer"));
            };
            let x = Tensor::uniform(&[13, 8], -1.0, 1.0, &mut rng);
            let mut cs = Vec::new();
            let one = tp_shard_check(m, &cfg, &x, 1)?;
            cs.push(Check::zero(format!("tp {inst} T=1"), one.max_abs_dev));
            for t in [2, 4] {
                let r = tp_shard_check(m, &cfg, &x, t)?;
                cs.push(Check::below(format!("tp {inst} T={t}"), r.max_abs_dev, 1e-10));
                cs.push(Check::exact(format!("tp {inst} T={t} all-reduce elements"), r.allreduce_elements, t * 13 * 8));
            }
            Ok(cs)
        });
    }
}

fn moe(checks: &mut Vec<Check>) {
    let mut rng = Rng::seed(404);
    for e in [1, 4, 8] {
        let mut ks = vec![1, 2, e];
        ks.retain(|&k| k <= e);
        ks.dedup();
        for k in ks {
            let cfg = MoeConfig { num_experts: e, top_k: k, hidden: 6, ffn_dim: 5, aux_loss_weight: 0.01 };
            guard(checks, format!("moe E={e} k={k}"), || {
                let layer = MoeLayer::init(&cfg, &mut rng)?;
                let mut dense_err: f64 = 0.0;
                let mut simplex = true;
                for tokens in [1, 17, 64] {
                    let x = Tensor::uniform(&[tokens, 6], -2.0, 2.0, &mut rng);
                    let (y, aux) = moe_forward(&x, &layer, &cfg)?;
                    dense_err = dense_err.max(y.max_abs_diff(&moe_forward_dense(&x, &layer, k)?)?);
                    simplex &= aux.is_finite();
                    let d = route(&x, &layer.router, k)?;
                    for (ids, g) in d.experts.iter().zip(&d.gates) {
                        let mut s = ids.clone();
                        s.sort_unstable();
                        s.dedup();
                        simplex &= s.len() == k && ids.iter().all(|&i| i < e);
                        simplex &= g.iter().all(|&w| w > 0.0) && (g.iter().sum::<f64>() - 1.0).abs() < 1e-12;
                    }
                    simplex &= (d.fractions(e).iter().sum::<f64>() - 1.0).abs() < 1e-12;
                }
                Ok(vec![
                    Check::below(format!("moe E={e} k={k} sparse vs dense"), dense_err, 1e-10),
                    Check::truth(format!("moe E={e} k={k} gate simplex"), simplex),
                ])
            });
        }
    }
}

fn rebind<'t>(skeleton: &Model<Tensor>, vars: &[Var<'t>]) -> Result<Model<Var<'t>>> {
    let mut it = vars.iter().copied();
    skeleton.try_map(&mut |_| it.next().ok_or_else(|| Error::invalid("verify", "parameter count changed")))
}

fn grad(checks: &mut Vec<Check>) {
    let mut rng = Rng::seed(505);
    for inst in Instance::ALL {
        let spec = LsmSpec::new(inst, 3, 4);
        let x = LsmInputs::random(&spec, 7, &mut rng);
        let w = Tensor::uniform(&[7, 4], -1.0, 1.0, &mut rng);
        guard(checks, format!("grad {inst}"), || {
            let mut inputs = vec![x.q.clone(), x.k.clone(), x.v.clone()];
            let present: Vec<bool> = x.gates.fields().iter().map(|(_, g)| g.is_some()).collect();
            inputs.extend(x.gates.fields().iter().filter_map(|(_, g)| g.cloned()));
            let report = check_gradients(&inputs, 1e-6, |tape, v| {
                let mut it = v[3..].iter().copied();
                let mut next = |on: bool| if on { it.next() } else { None };
                let gates = GateSet {
                    decay: next(present[0]),
                    decay_col: next(present[1]),
                    rate: next(present[2]),
                    step: next(present[3]),
                    input: next(present[4]),
                    transition: next(present[5]),
                };
                let vars = LsmVars::new(v[0], v[1], v[2], gates);
                let (o, _) = lsm_chunked_var(tape, &vars, &spec, &ChunkOptions::new(3), None)?;
                o.mul(tape.constant(w.clone()))?.sum()
            })?;
            Ok(vec![Check::below(format!("grad {inst}"), report.max_rel_err, 1e-4)])
        });
    }
    guard(checks, "grad moe".into(), || {
        let cfg = MoeConfig { num_experts: 4, top_k: 2, hidden: 4, ffn_dim: 3, aux_loss_weight: 0.01 };
        let layer = MoeLayer::init(&cfg, &mut rng)?;
        let mut inputs = vec![Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng)];
        layer.visit("moe", &mut |_, t| inputs.push(t.clone()));
        let w = Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng);
        let report = check_gradients(&inputs, 1e-6, |tape, v| {
            let mut it = v[1..].iter().copied();
            let l = layer.try_map(&mut |_| it.next().ok_or_else(|| Error::invalid("verify", "param")))?;
            let out = moe_forward_var(tape, v[0], &l, &cfg)?;
            out.y.mul(tape.constant(w.clone()))?.sum()?.add(out.aux_loss)
        })?;
        Ok(vec![Check::below("grad moe", report.max_rel_err, 1e-4)])
    });
    guard(checks, "grad attention".into(), || {
        let inputs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[8, 4], -1.0, 1.0, &mut rng)).collect();
        let mask = attention_mask(0, 8, &[0, 0, 0, 0, 0, 1, 1, 1], true);
        let report = check_gradients(&inputs, 1e-6, |_, v| attend(v[0], v[1], v[2], &mask)?.mul(v[3])?.sum())?;
        Ok(vec![Check::below("grad attention", report.max_rel_err, 1e-4)])
    });
    for (inst, pattern) in [(Instance::Gla, "LN"), (Instance::DeltaNet, "LL"), (Instance::Bla, "NL")] {
        guard(checks, format!("grad model {inst} {pattern}"), || {
            let mut cfg = ModelConfig::new(8, 8, 2, pattern.parse()?, inst).with_vocab(16).with_experts(4, 2);
            cfg.chunk_size = 4;
            cfg.tie_embeddings = false;
            let model = build_model(&cfg, &mut rng)?;
            let docs: Vec<Vec<usize>> = [5, 4].iter().map(|&n| (0..n).map(|_| rng.below(16)).collect()).collect();
            let batch = pack_sequences(&docs)?;
            let leaves: Vec<Tensor> = model.leaves().into_iter().cloned().collect();
            let report = check_gradients(&leaves, 1e-6, |tape: &Tape, v| {
                let m = rebind(&model, v)?;
                let out = model_forward_var(tape, &m, &cfg, &batch)?;
                Ok(lm_loss(out.logits, &batch.labels, &out.aux_losses, cfg.aux_loss_weight)?.total)
            })?;
            Ok(vec![Check::below(format!("grad model {inst} {pattern}"), report.max_rel_err, 1e-3)])
        });
    }
}

fn packing(checks: &mut Vec<Check>) {
    let configs = [
        (Instance::Bla, "LL"),
        (Instance::Gla, "LL"),
        (Instance::DeltaNet, "LL"),
        (Instance::Mamba2, "LL"),
        (Instance::Rwkv7, "LL"),
        (Instance::Gla, "LN"),
        (Instance::Hgrn2, "NLN"),
    ];
    for (inst, pattern) in configs {
        guard(checks, format!("packing {inst} {pattern}"), || {
            let mut cfg = ModelConfig::new(8, 8, 2, pattern.parse()?, inst).with_vocab(16).with_experts(4, 2);
            cfg.chunk_size = 4;
            let mut rng = Rng::seed(606);
            let model = build_model(&cfg, &mut rng)?;
            let mut doc = |n: usize| -> Vec<usize> { (0..n).map(|_| rng.below(16)).collect() };
            let docs = [doc(7), doc(10), doc(3)];
            let other = doc(10);
            let packed = model_forward(&model, &cfg, &pack_sequences(&docs)?)?;
            let parts =
                docs.iter().map(|d| model_forward(&model, &cfg, &pack_sequences(std::slice::from_ref(d))?)).collect::<Result<Vec<_>>>()?;
            let sep = Tensor::concat_rows(&parts)?;
            let swapped = model_forward(&model, &cfg, &pack_sequences(&[docs[0].clone(), other, docs[2].clone()])?)?;
            let before = packed.slice_rows(0, 7)?.max_abs_diff(&swapped.slice_rows(0, 7)?)?;
            let after = packed.slice_rows(17, 20)?.max_abs_diff(&swapped.slice_rows(17, 20)?)?;
            Ok(vec![
                Check::below(format!("packing {inst} {pattern} packed vs separate"), packed.max_abs_diff(&sep)?, 1e-10),
                Check::zero(format!("packing {inst} {pattern} cross-document sensitivity"), before.max(after)),
            ])
        });
    }
}

fn comm(checks: &mut Vec<Check>) {
    let (d, heads) = (4, 2);
    for t in [2, 4] {
        guard(checks, format!("comm T={t}"), || {
            let mut cs = Vec::new();
            let mut kv: Vec<(usize, usize)> = Vec::new();
            for n in [16, 32, 64] {
                let mut cfg =
                    ModelConfig::new(d * heads, 8, heads, "LN".parse()?, Instance::Bla).with_normalizer(false).with_vocab(16);
                cfg.chunk_size = 4;
                let mut rng = Rng::seed(n as u64);
                let model = build_model(&cfg, &mut rng)?;
                let batch = pack_sequences(&[(0..n).map(|_| rng.below(16)).collect()])?;
                let tape = Tape::new();
                let bound = bind_model(&tape, &model, false)?;
                let mut g = RankGroup::new(t)?;
                hybrid_sp_forward(&mut g, &tape, &bound, &cfg, &batch)?;
                let log = g.comm_log();
                let state: Vec<_> = log.iter().filter(|r| r.layer == Some(0)).collect();
                let attn: Vec<_> = log.iter().filter(|r| r.layer == Some(1)).collect();
                cs.push(Check::exact(format!("comm T={t} N={n} state collectives"), state.len(), 1));
                cs.push(Check::exact(
                    format!("comm T={t} N={n} state elements"),
                    state.iter().map(|r| r.elements).sum::<usize>(),
                    heads * t * d * d,
                ));
                cs.push(Check::exact(format!("comm T={t} N={n} K/V collectives"), attn.len(), 2));
                kv.push((n, attn.iter().filter(|r| r.kind == CommKind::AllGather).map(|r| r.elements).sum()));
            }
            let (n0, e0) = kv[0];
            for &(n, e) in &kv {
                cs.push(Check::exact(format!("comm T={t} N={n} K/V elements linear in N"), e * n0, e0 * n));
                cs.push(Check::exact(format!("comm T={t} N={n} K/V elements"), e, 2 * n * heads * d));
            }
            Ok(cs)
        });
    }
    guard(checks, "comm attention kernel".into(), || {
        let mut rng = Rng::seed(9);
        let (n, d) = (32, 4);
        let q = Tensor::randn(&[n, d], 1.0, &mut rng);
        let want = softmax_attention_parallel(&q, &q, &q, true)?;
        let tape = Tape::new();
        let seq = ChunkedSequence::equal(n, 4)?;
        let parts = seq.rows(tape.constant(q.clone()))?;
        let qkv: Vec<_> = parts.iter().map(|&p| (p, p, p)).collect();
        let mut g = RankGroup::new(4)?;
        let out = joined(&sp_attention_allgather(&mut g, &tape, &seq, &qkv)?)?;
        let received: Vec<usize> = g.comm_log().iter().map(|r| r.received).collect();
        Ok(vec![
            Check::below("comm attention kernel output", out.max_abs_diff(&want)?, 1e-10),
            Check::exact("comm attention kernel received per rank", received.iter().sum(), 2 * 3 * n * d / 4),
        ])
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes() {
        let report = run_verify(&VerifyOptions::default());
        for s in &report.suites {
            let bad: Vec<_> = s.failures().collect();
            assert!(s.passed, "{}: {bad:#?}", s.suite);
        }
        assert!(report.passed);
    }

    #[test]
    fn injected_fault_fails_kernels_only() {
        let opts = VerifyOptions { only: vec![Suite::Kernels], fault: Some(Fault::ChunkDecayOffByOne) };
        let report = run_verify(&opts);
        assert!(!report.passed);
        assert_eq!(report.suites.len(), 1);
    }

    #[test]
    fn suite_names_parse() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("bogus".parse::<Suite>().is_err());
    }
}
