use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Several documents laid end to end as one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub tokens: Vec<usize>,
    /// Document start offsets followed by the total length: `[0, .., len]`.
    pub boundaries: Vec<usize>,
    /// Target for each position; `None` positions carry no loss.
    pub labels: Vec<Option<usize>>,
}

impl PackedBatch {
    /// Checks boundary strictness and label length.
    pub fn new(tokens: Vec<usize>, boundaries: Vec<usize>, labels: Vec<Option<usize>>) -> Result<Self> {
        if boundaries.first() != Some(&0) || boundaries.last() != Some(&tokens.len()) {
            return Err(Error::invalid("packed_batch", "boundaries must start at 0 and end at the token count"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("packed_batch", "boundaries must be strictly ascending (no empty documents)"));
        }
        if labels.len() != tokens.len() {
            return Err(Error::invalid("packed_batch", "one label slot per token required"));
        }
        Ok(Self { tokens, boundaries, labels })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn num_docs(&self) -> usize {
        self.boundaries.len() - 1
    }

    /// Document index of every position.
    pub fn doc_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.len());
        for (d, w) in self.boundaries.windows(2).enumerate() {
            ids.extend(std::iter::repeat_n(d, w[1] - w[0]));
        }
        ids
    }

    /// Interior document starts, where recurrent state must restart.
    pub fn resets(&self) -> &[usize] {
        &self.boundaries[1..self.boundaries.len() - 1]
    }

    /// Positions `start..end` with boundaries rebased to `start`.
    pub fn resets_within(&self, start: usize, end: usize) -> Vec<usize> {
        self.boundaries.iter().filter(|&&b| b > start && b < end).map(|b| b - start).collect()
    }

    pub fn doc(&self, d: usize) -> &[usize] {
        &self.tokens[self.boundaries[d]..self.boundaries[d + 1]]
    }
}

/// Concatenates `docs`, labelling every position with the next token of
/// the same document.
pub fn pack_sequences(docs: &[Vec<usize>]) -> Result<PackedBatch> {
    if docs.is_empty() {
        return Err(Error::invalid("pack_sequences", "no documents"));
    }
    let mut tokens = Vec::new();
    let mut boundaries = vec![0];
    let mut labels = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::invalid("pack_sequences", format!("document {i} is empty")));
        }
        tokens.extend_from_slice(d);
        labels.extend(d.iter().skip(1).map(|&t| Some(t)));
        labels.push(None);
        boundaries.push(tokens.len());
    }
    PackedBatch::new(tokens, boundaries, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_examples() {
        assert_eq!(pack_sequences(&[vec![1, 2, 3], vec![4, 5, 6, 7, 8]]).unwrap().boundaries, vec![0, 3, 8]);
        assert_eq!(pack_sequences(&[vec![1, 2, 3, 4]]).unwrap().boundaries, vec![0, 4]);
        let p = pack_sequences(&[vec![1], vec![2], vec![3]]).unwrap();
        assert_eq!(p.boundaries, vec![0, 1, 2, 3]);
        assert_eq!(p.resets(), &[1, 2]);
        assert_eq!(p.doc_ids(), vec![0, 1, 2]);
    }

    #[test]
    fn empty_document_rejected() {
        assert!(pack_sequences(&[vec![1, 2], vec![]]).is_err());
        assert!(PackedBatch::new(vec![1, 2], vec![0, 2, 2], vec![None; 2]).is_err());
    }

    #[test]
    fn labels_stay_within_documents() {
        let p = pack_sequences(&[vec![5, 6], vec![7, 8, 9]]).unwrap();
        assert_eq!(p.labels, vec![Some(6), None, Some(8), Some(9), None]);
        assert_eq!(p.resets_within(1, 5), vec![1]);
        assert_eq!(p.doc(1), &[7, 8, 9]);
    }
}
