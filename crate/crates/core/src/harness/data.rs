use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{pack_sequences, PackedBatch};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Byte values plus one beginning-of-sequence token.
pub const BYTE_VOCAB: usize = 257;
pub const BOS: usize = 256;

/// One recall probe: `k1 v1 k2 v2 .. kP vP q1 .. qQ`, labelled only at the
/// queries with the value bound to the queried key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MqarExample {
    pub tokens: Vec<usize>,
    pub labels: Vec<Option<usize>>,
}

impl MqarExample {
    /// Key-value bindings, read back from the token layout.
    pub fn bindings(&self, pairs: usize) -> Vec<(usize, usize)> {
        self.tokens[..2 * pairs].chunks(2).map(|p| (p[0], p[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MqarDataset {
    pub seed: u64,
    pub pairs: usize,
    pub queries: usize,
    pub vocab: usize,
    pub examples: Vec<MqarExample>,
}

/// Keys are drawn without replacement from `[0, vocab/2)`, values with
/// replacement from `[vocab/2, vocab)`, and queries without replacement
/// from the bound keys.
pub fn gen_mqar(seed: u64, pairs: usize, vocab: usize, queries: usize, count: usize) -> Result<MqarDataset> {
    if pairs == 0 || queries == 0 {
        return Err(Error::Config("mqar needs at least one pair and one query".into()));
    }
    if pairs > vocab / 2 {
        return Err(Error::Config(format!(
            "vocab {vocab} has only {} key tokens for {pairs} distinct keys",
            vocab / 2
        )));
    }
    if queries > pairs {
        return Err(Error::Config(format!("{queries} distinct queries need at least as many pairs, got {pairs}")));
    }
    let half = vocab / 2;
    let mut rng = Rng::seed(seed);
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let keys = rng.sample_distinct(half, pairs);
        let values: Vec<usize> = (0..pairs).map(|_| half + rng.below(vocab - half)).collect();
        let asked = rng.sample_distinct(pairs, queries);
        let mut tokens = Vec::with_capacity(2 * pairs + queries);
        let mut labels = vec![None; 2 * pairs];
        for (k, v) in keys.iter().zip(&values) {
            tokens.extend([*k, *v]);
        }
        for &i in &asked {
            tokens.push(keys[i]);
            labels.push(Some(values[i]));
        }
        examples.push(MqarExample { tokens, labels });
    }
    Ok(MqarDataset { seed, pairs, queries, vocab, examples })
}

impl MqarDataset {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Examples at `indices` as one packed batch, one document each.
    pub fn pack(&self, indices: &[usize]) -> Result<PackedBatch> {
        let mut tokens = Vec::new();
        let mut labels = Vec::new();
        let mut boundaries = vec![0];
        for &i in indices {
            let ex = &self.examples[i];
            tokens.extend_from_slice(&ex.tokens);
            labels.extend_from_slice(&ex.labels);
            boundaries.push(tokens.len());
        }
        PackedBatch::new(tokens, boundaries, labels)
    }
}

/// Labelled rows whose argmax logit is the label, and the labelled count.
pub fn label_accuracy(logits: &Tensor, labels: &[Option<usize>]) -> Result<(usize, usize)> {
    let (n, _) = logits.dims2()?;
    if n != labels.len() {
        return Err(Error::shape("label_accuracy", logits.shape(), &[labels.len()]));
    }
    let mut hit = 0;
    let mut total = 0;
    for (r, l) in labels.iter().enumerate() {
        let Some(target) = l else { continue };
        let row = logits.row_slice(r);
        let best = row.iter().enumerate().fold(0, |b, (i, &x)| if x > row[b] { i } else { b });
        hit += usize::from(best == *target);
        total += 1;
    }
    Ok((hit, total))
}

/// Byte corpus sampled as fixed-length windows, each prefixed with [`BOS`].
pub struct TextCorpus {
    bytes: Vec<u8>,
}

impl TextCorpus {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 2 {
            return Err(Error::Config("text corpus needs at least two bytes".into()));
        }
        Ok(Self { bytes })
    }

    /// `count` windows of `len` tokens, `BOS` followed by `len − 1` bytes.
    pub fn batch(&self, rng: &mut Rng, count: usize, len: usize) -> Result<PackedBatch> {
        if len < 2 {
            return Err(Error::Config("text windows need at least two tokens".into()));
        }
        let span = (len - 1).min(self.bytes.len());
        let docs: Vec<Vec<usize>> = (0..count)
            .map(|_| {
                let start = rng.below(self.bytes.len() - span + 1);
                std::iter::once(BOS).chain(self.bytes[start..start + span].iter().map(|&b| b as usize)).collect()
            })
            .collect();
        pack_sequences(&docs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_pair_recalls_its_value() {
        let d = gen_mqar(3, 1, 8, 1, 5).unwrap();
        for ex in &d.examples {
            assert_eq!(ex.tokens.len(), 3);
            assert_eq!(ex.tokens[2], ex.tokens[0]);
            assert_eq!(ex.labels, vec![None, None, Some(ex.tokens[1])]);
        }
    }

    #[test]
    fn generation_is_seeded() {
        assert_eq!(gen_mqar(11, 4, 32, 3, 20).unwrap(), gen_mqar(11, 4, 32, 3, 20).unwrap());
        assert_ne!(gen_mqar(11, 4, 32, 3, 20).unwrap(), gen_mqar(12, 4, 32, 3, 20).unwrap());
    }

    #[test]
    fn labels_match_bindings_by_scan() {
        let d = gen_mqar(5, 6, 40, 4, 50).unwrap();
        for ex in &d.examples {
            let binds = ex.bindings(d.pairs);
            let keys: std::collections::HashSet<_> = binds.iter().map(|b| b.0).collect();
            assert_eq!(keys.len(), d.pairs);
            for (t, l) in ex.labels.iter().enumerate() {
                match l {
                    None => assert!(t < 2 * d.pairs),
                    Some(v) => {
                        let q = ex.tokens[t];
                        let bound: Vec<_> = binds.iter().filter(|b| b.0 == q).map(|b| b.1).collect();
                        assert_eq!(bound, vec![*v]);
                        assert!(*v >= d.vocab / 2 && *v < d.vocab);
                    }
                }
            }
        }
    }

    #[test]
    fn infeasible_requests_error() {
        assert!(gen_mqar(0, 5, 8, 1, 1).is_err());
        assert!(gen_mqar(0, 2, 8, 3, 1).is_err());
        assert!(gen_mqar(0, 0, 8, 0, 1).is_err());
    }

    #[test]
    fn json_round_trip_and_packing() {
        let d = gen_mqar(1, 3, 16, 2, 4).unwrap();
        assert_eq!(MqarDataset::from_json(&d.to_json().unwrap()).unwrap(), d);
        let p = d.pack(&[0, 2]).unwrap();
        assert_eq!(p.boundaries, vec![0, 8, 16]);
        assert_eq!(p.labels.iter().filter(|l| l.is_some()).count(), 4);
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::from_rows(&[&[0.0, 1.0], &[2.0, 1.0], &[0.0, 3.0]]).unwrap();
        assert_eq!(label_accuracy(&logits, &[Some(1), None, Some(0)]).unwrap(), (1, 2));
    }

    #[test]
    fn text_windows_start_with_bos() {
        let c = TextCorpus::from_bytes(b"hello world".to_vec()).unwrap();
        let b = c.batch(&mut Rng::seed(0), 3, 5).unwrap();
        assert_eq!(b.num_docs(), 3);
        for d in 0..3 {
            assert_eq!(b.doc(d)[0], BOS);
            assert_eq!(b.doc(d).len(), 5);
        }
    }
}
