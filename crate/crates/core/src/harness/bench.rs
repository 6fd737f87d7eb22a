use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{softmax_attention_parallel, softmax_attention_step, KvCache};
use crate::error::{Error, Result};
use crate::lsm::{lsm_forward_chunked_with, recurrent_step, ChunkOptions, LsmInputs, LsmSpec, MemoryState};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::config::BenchSection;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    /// Sequences per measurement: `token_budget / length`.
    pub sequences: usize,
    pub lsm_seconds: f64,
    pub attention_seconds: f64,
    pub lsm_ns_per_token: f64,
    pub attention_ns_per_token: f64,
    /// Largest recurrent state over a token-by-token decode.
    pub lsm_state_elements: usize,
    /// KV cache after decoding the whole sequence.
    pub kv_cache_elements: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub instance: String,
    pub head_dim: usize,
    pub chunk_size: usize,
    pub token_budget: usize,
    pub repeats: usize,
    pub rows: Vec<BenchRow>,
    /// Time per token at the longest length over the shortest.
    pub lsm_growth: f64,
    pub attention_growth: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn peak_state(x: &LsmInputs, spec: &LsmSpec) -> Result<usize> {
    let mut s = MemoryState::new(spec);
    let mut peak = s.elements();
    for t in 0..x.len() {
        s = recurrent_step(&s, &x.step(t, spec), spec)?.0;
        peak = peak.max(s.elements());
    }
    Ok(peak)
}

fn cache_size(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<usize> {
    let mut cache = KvCache::new();
    for t in 0..q.rows() {
        softmax_attention_step(&mut cache, q.row_slice(t), k.row_slice(t), v.row_slice(t))?;
    }
    Ok(cache.elements())
}

/// Sweeps sequence length at a fixed token budget, timing the chunked LSM
/// kernel and causal softmax attention on one head.
pub fn run_bench(cfg: &BenchSection, seed: u64) -> Result<BenchReport> {
    if cfg.lengths.is_empty() || cfg.repeats == 0 || cfg.head_dim == 0 || cfg.chunk_size == 0 {
        return Err(Error::Config("bench needs lengths, repeats, head_dim and chunk_size".into()));
    }
    if let Some(&l) = cfg.lengths.iter().find(|&&l| l == 0 || l > cfg.token_budget) {
        return Err(Error::Config(format!("length {l} must be in 1..={}", cfg.token_budget)));
    }
    let spec = LsmSpec::new(cfg.instance, cfg.head_dim, cfg.head_dim);
    spec.validate()?;
    let opts = ChunkOptions::new(cfg.chunk_size);
    let mut rng = Rng::seed(seed);
    let mut rows = Vec::with_capacity(cfg.lengths.len());
    for &len in &cfg.lengths {
        let sequences = cfg.token_budget / len;
        let inputs: Vec<LsmInputs> = (0..sequences).map(|_| LsmInputs::random(&spec, len, &mut rng)).collect();
        let d = cfg.head_dim;
        let qkv: Vec<[Tensor; 3]> =
            (0..sequences).map(|_| [0, 1, 2].map(|_| Tensor::randn(&[len, d], 1.0, &mut rng))).collect();
        let mut lsm_times = Vec::with_capacity(cfg.repeats);
        let mut attn_times = Vec::with_capacity(cfg.repeats);
        for _ in 0..cfg.repeats {
            let t = Instant::now();
            for x in &inputs {
                std::hint::black_box(lsm_forward_chunked_with(x, &spec, &opts, None)?);
            }
            lsm_times.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            for [q, k, v] in &qkv {
                std::hint::black_box(softmax_attention_parallel(q, k, v, true)?);
            }
            attn_times.push(t.elapsed().as_secs_f64());
        }
        let (lsm_seconds, attention_seconds) = (median(lsm_times), median(attn_times));
        let tokens = (sequences * len) as f64;
        let [q, k, v] = &qkv[0];
        rows.push(BenchRow {
            length: len,
            sequences,
            lsm_seconds,
            attention_seconds,
            lsm_ns_per_token: lsm_seconds * 1e9 / tokens,
            attention_ns_per_token: attention_seconds * 1e9 / tokens,
            lsm_state_elements: peak_state(&inputs[0], &spec)?,
            kv_cache_elements: cache_size(q, k, v)?,
        });
    }
    let first = rows.iter().min_by_key(|r| r.length).expect("non-empty");
    let last = rows.iter().max_by_key(|r| r.length).expect("non-empty");
    Ok(BenchReport {
        instance: cfg.instance.name().into(),
        head_dim: cfg.head_dim,
        chunk_size: cfg.chunk_size,
        token_budget: cfg.token_budget,
        repeats: cfg.repeats,
        lsm_growth: last.lsm_ns_per_token / first.lsm_ns_per_token,
        attention_growth: last.attention_ns_per_token / first.attention_ns_per_token,
        rows,
    })
}

pub fn write_bench_table(w: &mut impl Write, report: &BenchReport) -> Result<()> {
    writeln!(
        w,
        "length\tsequences\tlsm_ns_per_token\tattention_ns_per_token\tlsm_state_elements\tkv_cache_elements"
    )?;
    for r in &report.rows {
        writeln!(
            w,
            "{}\t{}\t{:.1}\t{:.1}\t{}\t{}",
            r.length, r.sequences, r.lsm_ns_per_token, r.attention_ns_per_token, r.lsm_state_elements, r.kv_cache_elements
        )?;
    }
    Ok(())
}

/// Writes `bench.json` and `bench.tsv` into `dir`.
pub fn write_bench(dir: &Path, report: &BenchReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("bench.json"), serde_json::to_string_pretty(report)?)?;
    let mut f = std::fs::File::create(dir.join("bench.tsv"))?;
    write_bench_table(&mut f, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsm::Instance;

    #[test]
    fn memory_columns_follow_their_growth_laws() {
        let cfg = BenchSection {
            instance: Instance::Gla,
            lengths: vec![16, 32, 64],
            token_budget: 64,
            head_dim: 4,
            chunk_size: 8,
            repeats: 1,
        };
        let r = run_bench(&cfg, 1).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.sequences).collect::<Vec<_>>(), vec![4, 2, 1]);
        assert!(r.rows.iter().all(|row| row.lsm_state_elements == 16));
        for row in &r.rows {
            assert_eq!(row.kv_cache_elements, 2 * 4 * row.length);
        }
        let mut buf = Vec::new();
        write_bench_table(&mut buf, &r).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 4);
    }

    #[test]
    fn bad_lengths_rejected() {
        let cfg = BenchSection { lengths: vec![128], token_budget: 64, ..BenchSection::default() };
        assert!(run_bench(&cfg, 0).is_err());
    }
}
