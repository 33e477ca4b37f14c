//! Exact cosine-similarity index and near-boundary candidate retrieval.

use bacl_numerics::Tensor;
use serde::Serialize;

use crate::bns::difficulty;
use crate::encoder::{self, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::synthdata::Corpus;

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityIndex {
    pub modality: Modality,
    pub ids: Vec<usize>,
    /// One unit-norm row per id.
    pub vectors: Tensor,
    pub built_at_epoch: usize,
}

impl ModalityIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, row: usize) -> &[f64] {
        self.vectors.row(row)
    }
}

/// Encodes every sample of `corpus` in `modality`; rows follow sample ids.
pub fn build(corpus: &Corpus, params: &EncoderParams, modality: Modality, epoch: usize) -> Result<ModalityIndex> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let vectors = encoder::encode_all(params, &corpus.samples, modality)?;
    Ok(ModalityIndex {
        modality,
        ids: corpus.samples.iter().map(|s| s.id).collect(),
        vectors,
        built_at_epoch: epoch,
    })
}

/// `s(anchor, candidate) − s(anchor, positive)`; positive when the
/// candidate out-scores the true match.
pub fn boundary_score(anchor_sim_to_candidate: f64, anchor_sim_to_positive: f64) -> f64 {
    anchor_sim_to_candidate - anchor_sim_to_positive
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateEntry {
    pub candidate_id: usize,
    pub similarity: f64,
    pub boundary_score: f64,
    pub difficulty: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateSet {
    pub anchor_id: usize,
    pub entries: Vec<CandidateEntry>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Descending similarity, ascending id on ties.
pub(crate) fn rank_order(a: (usize, f64), b: (usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Exact scan for negatives whose similarity to `anchor` lies within
/// `epsilon` of `positive_sim`, keeping the `k_max` most similar.
pub fn retrieve_candidates(
    index: &ModalityIndex,
    anchor_id: usize,
    anchor: &[f64],
    positive_sim: f64,
    epsilon: f64,
    k_max: usize,
) -> Result<CandidateSet> {
    if !(epsilon > 0.0) {
        return Err(Error::config(format!("epsilon must be positive, got {epsilon}")));
    }
    if k_max == 0 {
        return Err(Error::config("k_max must be at least 1"));
    }
    if anchor.len() != index.vectors.cols() {
        return Err(Error::LengthMismatch {
            op: "retrieve_candidates",
            left: anchor.len(),
            right: index.vectors.cols(),
        });
    }
    let mut hits: Vec<(usize, f64)> = index
        .ids
        .iter()
        .enumerate()
        .filter(|&(_, &id)| id != anchor_id)
        .filter_map(|(row, &id)| {
            let s = encoder::dot(anchor, index.vector(row));
            ((s - positive_sim).abs() <= epsilon).then_some((id, s))
        })
        .collect();
    hits.sort_by(|&a, &b| rank_order(a, b));
    hits.truncate(k_max);
    let entries = hits
        .into_iter()
        .map(|(id, s)| CandidateEntry {
            candidate_id: id,
            similarity: s,
            boundary_score: boundary_score(s, positive_sim),
            difficulty: difficulty(s, positive_sim),
        })
        .collect();
    Ok(CandidateSet { anchor_id, entries })
}

/// Row of `index` holding `id`, if present. Rows are usually in id order,
/// which makes the fast path exact.
pub fn row_of(index: &ModalityIndex, id: usize) -> Option<usize> {
    if index.ids.get(id) == Some(&id) {
        return Some(id);
    }
    index.ids.iter().position(|&i| i == id)
}

/// A retrieved negative tagged with the modality it was drawn from. A
/// `Y` candidate competes with the anchor's `y`; an `X` candidate competes
/// with the anchor's `x`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoolEntry {
    pub modality: Modality,
    pub entry: CandidateEntry,
}

/// Union of both retrieval directions for pair `anchor_id`: `x → Y-index`
/// then `y → X-index`.
pub fn candidate_pool(
    x_index: &ModalityIndex,
    y_index: &ModalityIndex,
    anchor_id: usize,
    epsilon: f64,
    k_max: usize,
) -> Result<Vec<PoolEntry>> {
    let rx = row_of(x_index, anchor_id).ok_or(Error::config(format!("anchor {anchor_id} not in index")))?;
    let ry = row_of(y_index, anchor_id).ok_or(Error::config(format!("anchor {anchor_id} not in index")))?;
    let x = x_index.vector(rx);
    let y = y_index.vector(ry);
    let pos = encoder::dot(x, y);
    let mut pool = Vec::new();
    for e in retrieve_candidates(y_index, anchor_id, x, pos, epsilon, k_max)?.entries {
        pool.push(PoolEntry {
            modality: Modality::Y,
            entry: e,
        });
    }
    for e in retrieve_candidates(x_index, anchor_id, y, pos, epsilon, k_max)?.entries {
        pool.push(PoolEntry {
            modality: Modality::X,
            entry: e,
        });
    }
    Ok(pool)
}
