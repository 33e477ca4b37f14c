//! Study drivers: hard-negative mining, corpus-size scaling and mismatch
//! localisation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics;
use crate::cla;
use crate::encoder::{self, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::index::{boundary_score, rank_order, CandidateEntry, PoolEntry};
use crate::bns::difficulty;
use crate::synthdata::{generate, generate_split, similarity_matrix, Corpus, CorpusSpec, Split};
use crate::trainer::{self, Arm, Model, Optimizer, TrainConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    /// Descending.
    pub eps_list: Vec<f64>,
    pub k_list: Vec<usize>,
    pub probe_epochs: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            eps_list: vec![0.40, 0.30, 0.20, 0.10, 0.05],
            k_list: vec![5, 10, 20],
            probe_epochs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiningPoint {
    pub epsilon: f64,
    pub k: usize,
    /// Mined training candidates.
    pub candidates: usize,
    /// After the probe finetune: share of each evaluation anchor's `k`
    /// nearest neighbours under the starting model that the finetuned model
    /// ranks above the true match.
    pub fpr: f64,
    /// Share of the mined candidates the starting model ranks above the
    /// true match.
    pub fpr_mined: f64,
    pub recall_at_10: f64,
}

/// The `k` nearest non-matching `y` of every `x`, kept when their
/// similarity lies within `epsilon` of the true pair's.
pub fn mining_candidates(sims: &bacl_numerics::Tensor, k: usize, epsilon: f64) -> Vec<Vec<PoolEntry>> {
    let n = sims.rows();
    (0..n)
        .map(|i| {
            let pos = sims.at(i, i);
            let mut row: Vec<(usize, f64)> = (0..n).filter(|&j| j != i).map(|j| (j, sims.at(i, j))).collect();
            row.sort_by(|&a, &b| rank_order(a, b));
            row.truncate(k);
            row.into_iter()
                .filter(|&(_, s)| (s - pos).abs() <= epsilon)
                .map(|(j, s)| PoolEntry {
                    modality: Modality::Y,
                    entry: CandidateEntry {
                        candidate_id: j,
                        similarity: s,
                        boundary_score: boundary_score(s, pos),
                        difficulty: difficulty(s, pos),
                    },
                })
                .collect()
        })
        .collect()
}

/// Pooled share of candidates scored above their anchor's true match;
/// `None` without candidates.
pub fn false_positive_rate(sims: &bacl_numerics::Tensor, pools: &[Vec<PoolEntry>]) -> Option<f64> {
    let mut above = 0usize;
    let mut total = 0usize;
    for (i, pool) in pools.iter().enumerate() {
        let pos = sims.at(i, i);
        for e in pool {
            total += 1;
            if sims.at(i, e.entry.candidate_id) > pos {
                above += 1;
            }
        }
    }
    (total > 0).then(|| above as f64 / total as f64)
}

/// For every `(ε, k)`: mine candidates on `corpus` with `model`, finetune a
/// copy (resuming `optimizer` when given) on them for `probe_epochs`, then measure the false positive rate on
/// `eval` against the starting model's `k` nearest neighbours (a set that
/// does not depend on ε) and Recall@10. `eval` defaults to `corpus`.
/// Settings with no mined candidates yield no point.
pub fn mining_study(
    model: &Model,
    optimizer: Option<&Optimizer>,
    corpus: &Corpus,
    eval: Option<&Corpus>,
    train: &TrainConfig,
    study: &MiningConfig,
) -> Result<Vec<MiningPoint>> {
    if study.eps_list.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::config("eps_list must be descending"));
    }
    if study.k_list.contains(&0) {
        return Err(Error::config("k must be at least 1"));
    }
    let eval = eval.unwrap_or(corpus);
    let sims = similarity_matrix(corpus, &model.encoder)?;
    let eval_sims = similarity_matrix(eval, &model.encoder)?;
    let alpha = train.schedule().alpha_late;
    let settings: Vec<(usize, f64)> = study
        .k_list
        .iter()
        .flat_map(|&k| study.eps_list.iter().map(move |&e| (k, e)))
        .collect();
    let points: Vec<Option<MiningPoint>> = settings
        .par_iter()
        .map(|&(k, epsilon)| {
            let pools = mining_candidates(&sims, k, epsilon);
            let Some(fpr_mined) = false_positive_rate(&sims, &pools) else {
                return Ok(None);
            };
            let tuned = trainer::finetune(train, corpus, model.clone(), optimizer.cloned(), &pools, study.probe_epochs, alpha)?;
            let neighbours = mining_candidates(&eval_sims, k, f64::INFINITY);
            let tuned_sims = similarity_matrix(eval, &tuned.encoder)?;
            let fpr = false_positive_rate(&tuned_sims, &neighbours).ok_or(Error::Empty("evaluation neighbours"))?;
            let r = metrics::evaluate(eval, &tuned.encoder)?;
            Ok(Some(MiningPoint {
                epsilon,
                k,
                candidates: pools.iter().map(Vec::len).sum(),
                fpr,
                fpr_mined,
                recall_at_10: r.r10,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(points.into_iter().flatten().collect())
}

/// Mean hinge `relu(m − s⁺ + max_{j≠i} s(x_i, y_j))` over a corpus.
pub fn triplet_risk(corpus: &Corpus, params: &EncoderParams, margin: f64) -> Result<f64> {
    let s = similarity_matrix(corpus, params)?;
    let n = s.rows();
    if n < 2 {
        return Err(Error::config("triplet risk needs at least 2 pairs"));
    }
    let total: f64 = (0..n)
        .map(|i| {
            let worst = (0..n).filter(|&j| j != i).map(|j| s.at(i, j)).fold(f64::NEG_INFINITY, f64::max);
            (margin - s.at(i, i) + worst).max(0.0)
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    /// Ascending.
    pub n_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub heldout_pairs: usize,
    pub arms: Vec<Arm>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            n_list: vec![500, 1000, 2000, 4000],
            seeds: vec![0, 1, 2],
            heldout_pairs: 1000,
            arms: vec![Arm::Bacl, Arm::Baseline],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRun {
    pub arm: Arm,
    pub n: usize,
    pub seed: u64,
    pub risk: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub arm: Arm,
    pub n: usize,
    pub mean_risk: f64,
    pub std_risk: f64,
    /// `mean_risk` minus the best arm's mean at the largest `n`.
    pub excess_mean: f64,
    pub seeds: usize,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Trains every arm at every corpus size and seed and reports held-out
/// triplet risk. Seed `s` fixes both the corpus world and the training
/// streams, so arms at one `(n, s)` see the same data.
pub fn rate_scaling(template: &TrainConfig, corpus: &CorpusSpec, scaling: &ScalingConfig) -> Result<(Vec<ScalingRow>, Vec<ScalingRun>)> {
    if scaling.n_list.len() < 3 || scaling.seeds.len() < 3 {
        return Err(Error::config("rate scaling needs at least 3 sizes and 3 seeds"));
    }
    if scaling.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("n_list must be strictly ascending"));
    }
    if scaling.arms.is_empty() {
        return Err(Error::Empty("arm list"));
    }
    let jobs: Vec<(Arm, usize, u64)> = scaling
        .arms
        .iter()
        .flat_map(|&a| scaling.n_list.iter().flat_map(move |&n| scaling.seeds.iter().map(move |&s| (a, n, s))))
        .collect();
    let runs: Vec<ScalingRun> = jobs
        .par_iter()
        .map(|&(arm, n, seed)| {
            let spec = CorpusSpec {
                seed,
                ..corpus.with_n_pairs(n)
            };
            let train = generate(&spec)?;
            let heldout = generate_split(&spec.with_n_pairs(scaling.heldout_pairs), Split::Heldout)?;
            let config = TrainConfig { seed, ..template.for_arm(arm) };
            let out = trainer::train(&config, &train, TrainOptions::default())?;
            Ok(ScalingRun {
                arm,
                n,
                seed,
                risk: triplet_risk(&heldout, &out.model.encoder, config.margin())?,
            })
        })
        .collect::<Result<_>>()?;
    let largest = *scaling.n_list.last().expect("nonempty");
    let mut rows = Vec::new();
    for &arm in &scaling.arms {
        for &n in &scaling.n_list {
            let v: Vec<f64> = runs.iter().filter(|r| r.arm == arm && r.n == n).map(|r| r.risk).collect();
            let (m, s) = mean_std(&v);
            rows.push(ScalingRow {
                arm,
                n,
                mean_risk: m,
                std_risk: s,
                excess_mean: 0.0,
                seeds: v.len(),
            });
        }
    }
    let floor = rows.iter().filter(|r| r.n == largest).map(|r| r.mean_risk).fold(f64::INFINITY, f64::min);
    for r in &mut rows {
        r.excess_mean = r.mean_risk - floor;
    }
    Ok((rows, runs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AelPoint {
    pub pairs: usize,
    pub coverage: f64,
}

/// Mean top-`top_frac` ΔA coverage of planted mismatch positions over every
/// sibling pair `(i, j)`, contrasting `(x_i, y_i)` with `(x_i, y_j)`.
pub fn ael_study(params: &EncoderParams, corpus: &Corpus, top_frac: f64) -> Result<AelPoint> {
    let partners = corpus.sibling_partners();
    let pairs: Vec<(usize, usize)> = partners.iter().enumerate().flat_map(|(i, ps)| ps.iter().map(move |&j| (i, j))).collect();
    let covs: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let Some(planted) = corpus.planted_positions(i, j, Modality::Y) else {
                return Ok(None);
            };
            if planted.is_empty() {
                return Ok(None);
            }
            let a = &corpus.samples[i];
            let pos = encoder::cross_attention(params, &a.x_tokens, &a.y_tokens)?;
            let neg = encoder::cross_attention(params, &a.x_tokens, &corpus.samples[j].y_tokens)?;
            let delta = cla::delta_map(&pos, &neg)?;
            Ok(Some(cla::ael_coverage(&delta, &planted, top_frac)?))
        })
        .collect::<Result<_>>()?;
    let used: Vec<f64> = covs.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::Empty("sibling pairs with planted mismatches"));
    }
    Ok(AelPoint {
        pairs: used.len(),
        coverage: used.iter().sum::<f64>() / used.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use bacl_numerics::Tensor;

    #[test]
    fn fpr_counts_candidates_above_truth() {
        let s = Tensor::from_rows(&[vec![0.5, 0.7, 0.4], vec![0.1, 0.9, 0.8], vec![0.0, 0.0, 1.0]]).unwrap();
        let pools = mining_candidates(&s, 2, 1.0);
        assert_eq!(pools[0].len(), 2);
        assert_eq!(false_positive_rate(&s, &pools), Some(1.0 / 6.0));
        let none = mining_candidates(&s, 2, 0.0);
        assert!(none.iter().all(Vec::is_empty));
        assert_eq!(false_positive_rate(&s, &none), None);
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
