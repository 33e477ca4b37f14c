//! Ranking metrics with exactly one relevant item per query.

use bacl_numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::synthdata::{similarity_matrix, Corpus};

/// 1-based rank of each query's ground truth.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RankingResult {
    pub ranks: Vec<usize>,
}

impl RankingResult {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Empty("ranking results"));
        }
        if ranks.contains(&0) {
            return Err(Error::config("ranks are 1-based"));
        }
        Ok(Self { ranks })
    }

    /// Ranks from a score matrix whose ground truth for row `i` is column
    /// `truth[i]`. Candidates are ordered by descending score, ties by
    /// ascending column.
    pub fn from_scores(scores: &Tensor, truth: &[usize]) -> Result<Self> {
        let (r, c) = scores.dims2()?;
        if truth.len() != r {
            return Err(Error::LengthMismatch {
                op: "from_scores",
                left: truth.len(),
                right: r,
            });
        }
        let ranks = (0..r)
            .map(|i| {
                let t = truth[i];
                let st = scores.at(i, t);
                1 + (0..c)
                    .filter(|&j| {
                        let s = scores.at(i, j);
                        s > st || (s == st && j < t)
                    })
                    .count()
            })
            .collect();
        Self::new(ranks)
    }

    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }
}

pub fn recall_at_k(results: &RankingResult, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let hits = results.ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / results.len() as f64)
}

/// With a single relevant item, average precision is `1/rank`.
pub fn mean_average_precision(results: &RankingResult) -> f64 {
    mrr(results)
}

pub fn mrr(results: &RankingResult) -> f64 {
    results.ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / results.len() as f64
}

pub fn ndcg_at_k(results: &RankingResult, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let total: f64 = results
        .ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / (1.0 + r as f64).log2() } else { 0.0 })
        .sum();
    Ok(total / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub map: f64,
    pub mrr: f64,
    pub ndcg10: f64,
}

impl RetrievalMetrics {
    pub fn from_ranking(results: &RankingResult) -> Result<Self> {
        Ok(Self {
            r1: recall_at_k(results, 1)?,
            r5: recall_at_k(results, 5)?,
            r10: recall_at_k(results, 10)?,
            map: mean_average_precision(results),
            mrr: mrr(results),
            ndcg10: ndcg_at_k(results, 10)?,
        })
    }

    /// `max(floor, 1 − R@10)`.
    pub fn alignment_error(&self) -> f64 {
        (1.0 - self.r10).max(ALIGNMENT_ERROR_FLOOR)
    }
}

pub const ALIGNMENT_ERROR_FLOOR: f64 = 1e-4;

/// Ranks of every sample's partner when querying with `query` embeddings
/// against the whole corpus in the other modality.
pub fn rank_corpus(corpus: &Corpus, params: &EncoderParams, query: Modality) -> Result<RankingResult> {
    let s = similarity_matrix(corpus, params)?;
    let s = match query {
        Modality::X => s,
        Modality::Y => s.transpose()?,
    };
    let truth: Vec<usize> = (0..corpus.len()).collect();
    RankingResult::from_scores(&s, &truth)
}

pub fn evaluate(corpus: &Corpus, params: &EncoderParams) -> Result<RetrievalMetrics> {
    RetrievalMetrics::from_ranking(&rank_corpus(corpus, params, Modality::X)?)
}

/// Accuracy, macro recall and macro F1 of a multi-class prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

pub fn classification_metrics(predicted: &[usize], truth: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            op: "classification_metrics",
            left: predicted.len(),
            right: truth.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::Empty("labels"));
    }
    if let Some(&bad) = predicted.iter().chain(truth).find(|&&c| c >= n_classes) {
        return Err(Error::config(format!("label {bad} outside {n_classes} classes")));
    }
    let mut tp = vec![0usize; n_classes];
    let mut pred_count = vec![0usize; n_classes];
    let mut true_count = vec![0usize; n_classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        pred_count[p] += 1;
        true_count[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| true_count[c] > 0).collect();
    let recall = |c: usize| tp[c] as f64 / true_count[c] as f64;
    let precision = |c: usize| {
        if pred_count[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / pred_count[c] as f64
        }
    };
    let f1 = |c: usize| {
        let (p, r) = (precision(c), recall(c));
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    let n = present.len() as f64;
    Ok(ClassificationMetrics {
        accuracy: tp.iter().sum::<usize>() as f64 / truth.len() as f64,
        macro_recall: present.iter().map(|&c| recall(c)).sum::<f64>() / n,
        macro_f1: present.iter().map(|&c| f1(c)).sum::<f64>() / n,
    })
}

/// Three-way relation labels for `(x_i, y_j)` pairs.
pub const MATCH: usize = 0;
pub const AMBIGUOUS: usize = 1;
pub const UNRELATED: usize = 2;

/// Builds a three-way task from a corpus: for every sample with a planted
/// partner, the triple (its own `y`, its partner's `y`, the `y` of a fixed
/// unrelated sample) is labelled match / ambiguous / unrelated. The
/// prediction ranks the three by similarity: highest is predicted match,
/// middle ambiguous, lowest unrelated.
pub fn three_way(corpus: &Corpus, params: &EncoderParams) -> Result<(ClassificationMetrics, usize)> {
    let s = similarity_matrix(corpus, params)?;
    let partners = corpus.sibling_partners();
    let n = corpus.len();
    let mut predicted = Vec::new();
    let mut truth = Vec::new();
    for (i, ps) in partners.iter().enumerate() {
        let Some(&amb) = ps.first() else { continue };
        let unrelated = (1..n).map(|o| (i + o * 7919) % n).find(|&j| j != i && !ps.contains(&j));
        let Some(unrelated) = unrelated else { continue };
        let items = [(i, MATCH), (amb, AMBIGUOUS), (unrelated, UNRELATED)];
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| s.at(i, items[b].0).total_cmp(&s.at(i, items[a].0)).then(a.cmp(&b)));
        for (slot, &k) in order.iter().enumerate() {
            predicted.push(slot);
            truth.push(items[k].1);
        }
    }
    let count = truth.len() / 3;
    Ok((classification_metrics(&predicted, &truth, 3)?, count))
}
