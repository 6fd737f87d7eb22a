//! Softmax attention: the parallel training form and the incremental decode
//! form with a growing key/value cache.
//!
//! Scores are scaled by `1/sqrt(d)`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keys and values seen so far; grows by one row per decoded token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

impl KvCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Stored scalars: grows linearly with the tokens seen.
    pub fn elements(&self) -> usize {
        self.keys.iter().chain(&self.values).map(Vec::len).sum()
    }
}

/// Appends `(k, v)` to `cache` and attends `q` over everything cached.
pub fn softmax_attention_step(cache: &mut KvCache, q: &[f64], k: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if q.len() != k.len() || cache.keys.first().is_some_and(|k0| k0.len() != k.len()) {
        return Err(Error::shape("softmax_attention_step", &[q.len()], &[k.len()]));
    }
    if cache.values.first().is_some_and(|v0| v0.len() != v.len()) {
        return Err(Error::shape("softmax_attention_step", &[cache.values[0].len()], &[v.len()]));
    }
    cache.keys.push(k.to_vec());
    cache.values.push(v.to_vec());
    let scale = 1.0 / (q.len() as f64).sqrt();
    let scores: Vec<f64> = cache
        .keys
        .iter()
        .map(|ki| scale * ki.iter().zip(q).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; v.len()];
    for (w, vi) in weights.iter().zip(&cache.values) {
        for (o, x) in out.iter_mut().zip(vi) {
            *o += w / total * x;
        }
    }
    Ok(out)
}

/// Which (query, key) pairs may interact.
///
/// Queries are rows `q_start..q_start + nq` of a sequence whose keys are all
/// `doc_ids.len()` positions; `doc_ids[j]` is the document of position `j`.
pub fn attention_mask(q_start: usize, nq: usize, doc_ids: &[usize], causal: bool) -> Vec<bool> {
    let nk = doc_ids.len();
    let mut mask = Vec::with_capacity(nq * nk);
    for i in 0..nq {
        let gi = q_start + i;
        for (j, &dj) in doc_ids.iter().enumerate() {
            mask.push((!causal || j <= gi) && dj == doc_ids[gi]);
        }
    }
    mask
}

/// `softmax(QKᵀ/sqrt(d) masked)·V` on the tape. `mask` is row-major
/// `rows(q) × rows(k)`, `true` where attention is allowed.
pub fn attend<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    let d = q.value().cols();
    let scores = q.matmul(k.t()?)?.scale(1.0 / (d as f64).sqrt())?;
    scores.masked_softmax_rows(mask)?.matmul(v)
}

/// Softmax attention weights of the parallel form.
pub fn attention_weights(q: &Tensor, k: &Tensor, causal: bool) -> Result<Tensor> {
    let n = q.rows();
    if n == 0 {
        return Err(Error::invalid("softmax_attention_parallel", "empty sequence"));
    }
    let tape = Tape::new();
    let scores = tape.constant(q.clone()).matmul(tape.constant(k.transpose()?))?;
    let scores = scores.scale(1.0 / (q.cols() as f64).sqrt())?;
    let mask = attention_mask(0, n, &vec![0; k.rows()], causal);
    Ok((*scores.masked_softmax_rows(&mask)?.value()).clone())
}

pub fn softmax_attention_parallel(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    let n = q.rows();
    if n == 0 {
        return Err(Error::invalid("softmax_attention_parallel", "empty sequence"));
    }
    let tape = Tape::new();
    let mask = attention_mask(0, n, &vec![0; k.rows()], causal);
    let out = attend(tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()), &mask)?;
    Ok((*out.value()).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use crate::rng::Rng;

    #[test]
    fn single_token_returns_its_value() {
        let v = Tensor::row(&[3.0, -1.0]);
        let o = softmax_attention_parallel(&Tensor::row(&[0.2, 0.1]), &Tensor::row(&[1.0, 1.0]), &v, true).unwrap();
        assert_eq!(o, v);
        let mut cache = KvCache::new();
        assert_eq!(softmax_attention_step(&mut cache, &[0.2, 0.1], &[1.0, 1.0], &[3.0, -1.0]).unwrap(), vec![3.0, -1.0]);
    }

    #[test]
    fn identical_keys_average_values() {
        let k = Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]]).unwrap();
        let v = Tensor::from_rows(&[&[1.0, 0.0], &[2.0, 3.0], &[6.0, 3.0]]).unwrap();
        let q = Tensor::from_rows(&[&[0.5, -0.5], &[1.0, 1.0], &[0.0, 2.0]]).unwrap();
        let o = softmax_attention_parallel(&q, &k, &v, false).unwrap();
        for i in 0..3 {
            assert!((o.at(i, 0) - 3.0).abs() < 1e-12 && (o.at(i, 1) - 2.0).abs() < 1e-12);
        }
        let mut cache = KvCache::new();
        let mut last = vec![];
        for i in 0..3 {
            last = softmax_attention_step(&mut cache, q.row_slice(i), k.row_slice(i), v.row_slice(i)).unwrap();
        }
        assert!((last[0] - 3.0).abs() < 1e-12 && (last[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn decode_matches_causal_parallel() {
        let mut rng = Rng::seed(17);
        for n in [1, 16, 64] {
            let q = Tensor::uniform(&[n, 4], -1.0, 1.0, &mut rng);
            let k = Tensor::uniform(&[n, 4], -1.0, 1.0, &mut rng);
            let v = Tensor::uniform(&[n, 4], -1.0, 1.0, &mut rng);
            let par = softmax_attention_parallel(&q, &k, &v, true).unwrap();
            let mut cache = KvCache::new();
            for i in 0..n {
                let o = softmax_attention_step(&mut cache, q.row_slice(i), k.row_slice(i), v.row_slice(i)).unwrap();
                assert_eq!(cache.len(), i + 1);
                assert_eq!(cache.elements(), 8 * (i + 1));
                for j in 0..4 {
                    assert!((o[j] - par.at(i, j)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut rng = Rng::seed(2);
        let q = Tensor::uniform(&[9, 3], -2.0, 2.0, &mut rng);
        let k = Tensor::uniform(&[9, 3], -2.0, 2.0, &mut rng);
        for causal in [true, false] {
            let w = attention_weights(&q, &k, causal).unwrap();
            for i in 0..9 {
                let row = w.row_slice(i);
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                if causal {
                    assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn document_mask_blocks_cross_document_pairs() {
        let m = attention_mask(0, 4, &[0, 0, 1, 1], true);
        let want = [
            true, false, false, false, //
            true, true, false, false, //
            false, false, true, false, //
            false, false, true, true,
        ];
        assert_eq!(m, want);
        assert_eq!(attention_mask(2, 2, &[0, 0, 1, 1], true), want[8..].to_vec());
    }

    #[test]
    fn empty_sequence_rejected() {
        let e = Tensor::zeros(&[0, 2]);
        assert!(softmax_attention_parallel(&e, &e, &e, true).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::seed(6);
        let inputs: Vec<Tensor> = (0..4).map(|_| Tensor::uniform(&[6, 4], -1.0, 1.0, &mut rng)).collect();
        let mask = attention_mask(0, 6, &[0, 0, 0, 1, 1, 1], true);
        let report = check_gradients(&inputs, 1e-6, |_, v| attend(v[0], v[1], v[2], &mask)?.mul(v[3])?.sum()).unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
