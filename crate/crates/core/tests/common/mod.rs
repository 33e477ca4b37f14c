//! Brute-force reference implementations, written without reusing the
//! library's own helpers. Shared by the integration tests and the CLI's
//! acceptance suite.
#![allow(dead_code)]

use bacl_core::encoder::{EncoderParams, Modality};
use bacl_core::synthdata::Corpus;
use bacl_numerics::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0)).unwrap()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / n).collect()
        })
        .collect()
}

/// Mean token, projected, passed through the output layer, normalised.
pub fn encode_ref(params: &EncoderParams, tokens: &Tensor, modality: Modality) -> Vec<f64> {
    let proj = match modality {
        Modality::X => &params.proj_x,
        Modality::Y => &params.proj_y,
    };
    let (t, d_in) = (tokens.rows(), tokens.cols());
    let d = proj.cols();
    let mut pooled = vec![0.0; d];
    for r in 0..t {
        for c in 0..d {
            let mut s = 0.0;
            for k in 0..d_in {
                s += tokens.at(r, k) * proj.at(k, c);
            }
            pooled[c] += s / t as f64;
        }
    }
    let mut out = vec![0.0; params.output.cols()];
    for (c, o) in out.iter_mut().enumerate() {
        for (k, p) in pooled.iter().enumerate() {
            *o += p * params.output.at(k, c);
        }
    }
    let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.into_iter().map(|v| v / n).collect()
}

pub fn dot_ref(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Candidates within `eps` of `pos`, excluding `anchor_id`, chosen by
/// repeated selection of the best remaining (higher similarity, then lower
/// id).
pub fn retrieve_ref(ids: &[usize], vectors: &[Vec<f64>], anchor_id: usize, anchor: &[f64], pos: f64, eps: f64, k: usize) -> Vec<(usize, f64)> {
    let mut left: Vec<(usize, f64)> = Vec::new();
    for (row, &id) in ids.iter().enumerate() {
        if id == anchor_id {
            continue;
        }
        let s = dot_ref(anchor, &vectors[row]);
        if (s - pos).abs() <= eps {
            left.push((id, s));
        }
    }
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            let (a, b) = (left[i], left[best]);
            if a.1 > b.1 || (a.1 == b.1 && a.0 < b.0) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// 1-based position of `truth` after sorting row `i` by descending score,
/// ties by ascending column.
pub fn rank_ref(scores: &Tensor, i: usize, truth: usize) -> usize {
    let mut order: Vec<usize> = (0..scores.cols()).collect();
    order.sort_by(|&a, &b| scores.at(i, b).partial_cmp(&scores.at(i, a)).unwrap().then(a.cmp(&b)));
    order.iter().position(|&c| c == truth).unwrap() + 1
}

pub struct MetricsRef {
    pub recall: [f64; 3],
    pub map: f64,
    pub mrr: f64,
    pub ndcg10: f64,
}

/// Recall@{1,5,10}, mAP, MRR and nDCG@10 from their general definitions:
/// average precision over the relevant set and DCG normalised by the ideal
/// ordering, each with a single relevant column per row.
pub fn metrics_ref(scores: &Tensor, truth: &[usize]) -> MetricsRef {
    let n = truth.len() as f64;
    let mut recall = [0.0; 3];
    let (mut ap, mut rr, mut ndcg) = (0.0, 0.0, 0.0);
    for (i, &t) in truth.iter().enumerate() {
        let mut order: Vec<usize> = (0..scores.cols()).collect();
        order.sort_by(|&a, &b| scores.at(i, b).partial_cmp(&scores.at(i, a)).unwrap().then(a.cmp(&b)));
        let rel: Vec<f64> = order.iter().map(|&c| if c == t { 1.0 } else { 0.0 }).collect();
        for (slot, k) in [1usize, 5, 10].into_iter().enumerate() {
            recall[slot] += rel.iter().take(k).sum::<f64>() / n;
        }
        let mut hits = 0.0;
        let mut prec_sum = 0.0;
        for (pos, r) in rel.iter().enumerate() {
            if *r > 0.0 {
                hits += 1.0;
                prec_sum += hits / (pos + 1) as f64;
            }
        }
        ap += prec_sum / hits / n;
        let first = rel.iter().position(|&r| r > 0.0).unwrap();
        rr += 1.0 / (first + 1) as f64 / n;
        let dcg: f64 = rel.iter().take(10).enumerate().map(|(p, r)| r / ((p + 2) as f64).log2()).sum();
        let mut ideal = rel.clone();
        ideal.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let idcg: f64 = ideal.iter().take(10).enumerate().map(|(p, r)| r / ((p + 2) as f64).log2()).sum();
        ndcg += dcg / idcg / n;
    }
    MetricsRef {
        recall,
        map: ap,
        mrr: rr,
        ndcg10: ndcg,
    }
}

/// Cells of `delta` whose count of strictly better cells (larger, or equal
/// with a smaller index) is below `k = ⌈q·N⌉`, with `k` found by integer
/// search.
pub fn omega_ref(delta: &[f64], q: f64) -> Vec<usize> {
    let n = delta.len();
    let mut k = 1;
    while (k as f64) < q * n as f64 - 1e-9 * (q * n as f64).max(1.0) && k < n {
        k += 1;
    }
    let mut cells: Vec<usize> = (0..n)
        .filter(|&c| {
            let better = (0..n).filter(|&o| delta[o] > delta[c] || (delta[o] == delta[c] && o < c)).count();
            better < k
        })
        .collect();
    cells.sort();
    cells
}

/// Mean over probes of the positive similarity minus the largest hard one.
pub fn margin_ref(params: &EncoderParams, corpus: &Corpus, probes: &[usize], hard: &[Vec<usize>]) -> f64 {
    let mut total = 0.0;
    for (&p, set) in probes.iter().zip(hard) {
        let x = encode_ref(params, &corpus.samples[p].x_tokens, Modality::X);
        let y = encode_ref(params, &corpus.samples[p].y_tokens, Modality::Y);
        let pos = dot_ref(&x, &y);
        let mut worst = f64::NEG_INFINITY;
        for &z in set {
            let yz = encode_ref(params, &corpus.samples[z].y_tokens, Modality::Y);
            worst = worst.max(dot_ref(&x, &yz));
        }
        total += pos - worst;
    }
    total / probes.len() as f64
}

pub mod gradient {
    use bacl_core::encoder::{EncoderVars, Modality};
    use bacl_core::index;
    use bacl_core::synthdata::{generate, Corpus, CorpusSpec};
    use bacl_core::trainer::{batch_objective, Arm, BatchPlan, BatchSettings, ContrastForm, LocalNegative, Model};
    use bacl_core::bns::PolicyVars;
    use bacl_numerics::{grad_check_many, GradCheckReport, Tensor};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub struct Setup {
        pub corpus: Corpus,
        pub model: Model,
        pub plan: BatchPlan,
    }

    /// A 2-pair batch over a small default-shaped corpus. Rows flagged in
    /// `with_pool` get three candidates per direction; the rest fall back.
    pub fn setup(with_pool: [bool; 2], seed: u64) -> Setup {
        let corpus = generate(&CorpusSpec {
            n_pairs: 24,
            seed,
            ..Default::default()
        })
        .unwrap();
        let model = Model::init(corpus.encoder_dims(32, 16), 32, seed);
        let xi = index::build(&corpus, &model.encoder, Modality::X, 0).unwrap();
        let yi = index::build(&corpus, &model.encoder, Modality::Y, 0).unwrap();
        let ids = vec![3, 11];
        let pools: Vec<_> = ids
            .iter()
            .zip(with_pool)
            .map(|(&id, on)| if on { index::candidate_pool(&xi, &yi, id, 2.5, 3).unwrap() } else { Vec::new() })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let noise = pools.iter().map(|p| (0..p.len()).map(|_| rng.random_range(-0.5..0.5)).collect()).collect();
        Setup {
            corpus,
            model,
            plan: BatchPlan {
                ids,
                pools,
                noise,
                fallback: vec![1, 0],
            },
        }
    }

    pub fn settings(arm: Arm, loss: ContrastForm, sampled_negatives: Option<usize>, lambda_policy: f64) -> BatchSettings {
        BatchSettings {
            alpha: -0.3,
            tau: 0.5,
            beta: 2.0,
            q_frac: 0.15,
            lambda_local: 0.3,
            lambda_policy,
            loss,
            sampled_negatives,
            local_negative: LocalNegative::HardestInBatch,
            use_sampler: arm.uses_sampler(),
            use_local: arm.uses_local(),
        }
    }

    /// Central differences of the batch objective against the tape, over
    /// all nine parameter tensors, or over the four policy tensors with the
    /// encoder held fixed.
    pub fn check(s: &Setup, settings: &BatchSettings, policy_only: bool) -> GradCheckReport {
        let dims = s.corpus.encoder_dims(32, 16);
        let all: Vec<Tensor> = s.model.tensors().into_iter().cloned().collect();
        let at = if policy_only { all[5..].to_vec() } else { all };
        grad_check_many(
            |tape, v| {
                let (enc, p) = if policy_only {
                    (s.model.encoder.register_frozen(tape), v)
                } else {
                    let enc = EncoderVars {
                        proj_x: v[0],
                        proj_y: v[1],
                        output: v[2],
                        query: v[3],
                        key: v[4],
                    };
                    (enc, &v[5..])
                };
                let pol = PolicyVars {
                    w1: p[0],
                    b1: p[1],
                    w2: p[2],
                    b2: p[3],
                };
                let out = batch_objective(tape, &enc, &pol, &dims, &s.corpus, &s.plan, settings)
                    .map_err(|e| match e {
                        bacl_core::Error::Numerics(n) => n,
                        other => panic!("batch objective failed: {other}"),
                    })?;
                Ok(out.objective)
            },
            &at,
            1e-5,
        )
        .unwrap()
    }
}
