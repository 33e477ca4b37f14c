//! Assembly of one batch objective on a tape.
//!
//! Every discrete or random choice for the batch (candidate pools, Gumbel
//! noise, uniform fallback partners) is fixed in a [`BatchPlan`] before the
//! tape is built, so the objective is a deterministic function of the
//! parameters and can be checked against finite differences.

use bacl_numerics::{Tape, Tensor, Var};

use super::config::{ContrastForm, LocalNegative};
use crate::bns::{self, PolicyVars};
use crate::cla::{self, ExtraNegatives, LossBreakdown};
use crate::encoder::{self, EncodedStack, EncoderDims, EncoderVars, Modality};
use crate::error::Result;
use crate::index::PoolEntry;
use crate::synthdata::Corpus;

/// Top fraction of ΔA cells used for the running localisation figure.
pub const AEL_TOP_FRAC: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub ids: Vec<usize>,
    /// Candidate pool per batch row; empty means the row falls back.
    pub pools: Vec<Vec<PoolEntry>>,
    /// Gumbel noise per row, aligned with `pools`.
    pub noise: Vec<Vec<f64>>,
    /// Uniformly drawn in-batch partner row per row, never the row itself.
    pub fallback: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchSettings {
    pub alpha: f64,
    pub tau: f64,
    pub beta: f64,
    pub q_frac: f64,
    pub lambda_local: f64,
    pub lambda_policy: f64,
    pub loss: ContrastForm,
    /// `Some(k)`: each anchor's `k` most probable candidates enter the
    /// contrastive loss as whole negatives. `None`: every candidate enters
    /// weighted by `p̃`.
    pub sampled_negatives: Option<usize>,
    /// Negative for the local loss when the sampler supplies none.
    pub local_negative: LocalNegative,
    pub use_sampler: bool,
    pub use_local: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BatchStats {
    pub rows: usize,
    pub anchors_with_pool: usize,
    pub fallbacks: usize,
    pub pool_size_sum: usize,
    pub chosen_difficulty_sum: f64,
    pub entropy_sum: f64,
    pub reward: Option<f64>,
    pub delta_mean_sum: f64,
    pub delta_count: usize,
    pub ael_sum: f64,
    pub ael_count: usize,
}

pub struct BatchObjective {
    /// `L_main − λ_policy·J`.
    pub objective: Var,
    pub breakdown: LossBreakdown,
    pub stats: BatchStats,
}

struct Candidates {
    /// `(batch row, pool entry)` in anchor-major order.
    entries: Vec<(usize, PoolEntry)>,
    /// Row inside the per-modality candidate stack for each entry.
    stack_row: Vec<usize>,
    y: Option<EncodedStack>,
    x: Option<EncodedStack>,
}

fn encode_ids(tape: &mut Tape, vars: &EncoderVars, corpus: &Corpus, ids: &[usize], dims: &EncoderDims, modality: Modality) -> Result<EncodedStack> {
    let stacked = encoder::stack_tokens(ids.iter().map(|&id| corpus.samples[id].tokens(modality)))?;
    let t = tape.constant(stacked);
    encoder::encode_on_tape(tape, vars, t, dims.tokens(modality), modality)
}

fn token_slice(tape: &mut Tape, states: Var, row: usize, per: usize) -> Result<Var> {
    Ok(tape.slice_rows(states, row * per, (row + 1) * per)?)
}

fn encode_candidates(tape: &mut Tape, vars: &EncoderVars, corpus: &Corpus, dims: &EncoderDims, plan: &BatchPlan) -> Result<Candidates> {
    let mut entries = Vec::new();
    let mut stack_row = Vec::new();
    let (mut ys, mut xs) = (Vec::new(), Vec::new());
    for (row, pool) in plan.pools.iter().enumerate() {
        for e in pool {
            let target = match e.modality {
                Modality::Y => &mut ys,
                Modality::X => &mut xs,
            };
            stack_row.push(target.len());
            target.push(e.entry.candidate_id);
            entries.push((row, e.clone()));
        }
    }
    let y = if ys.is_empty() {
        None
    } else {
        Some(encode_ids(tape, vars, corpus, &ys, dims, Modality::Y)?)
    };
    let x = if xs.is_empty() {
        None
    } else {
        Some(encode_ids(tape, vars, corpus, &xs, dims, Modality::X)?)
    };
    Ok(Candidates {
        entries,
        stack_row,
        y,
        x,
    })
}

struct SamplerResult {
    reward: Var,
    reward_value: f64,
    extras_xy: Option<ExtraNegatives>,
    extras_yx: Option<ExtraNegatives>,
    /// Global entry index of each row's hardest candidate.
    hardest: Vec<Option<usize>>,
}

#[allow(clippy::too_many_arguments)]
fn run_sampler(
    tape: &mut Tape,
    policy: &PolicyVars,
    cands: &Candidates,
    plan: &BatchPlan,
    emb: (Var, Var),
    x_emb: &Tensor,
    y_emb: &Tensor,
    settings: &BatchSettings,
    stats: &mut BatchStats,
) -> Result<SamplerResult> {
    let k = cands.entries.len();
    let b = plan.ids.len();
    let cy = match cands.y {
        Some(s) => Some(tape.value(s.embeddings)?.clone()),
        None => None,
    };
    let cx = match cands.x {
        Some(s) => Some(tape.value(s.embeddings)?.clone()),
        None => None,
    };
    let d = x_emb.cols();
    // Row of each entry's anchor, positive and candidate in `[x; y; cy; cx]`.
    let cy_rows = cy.as_ref().map_or(0, Tensor::rows);
    let (mut ra, mut rp, mut rc) = (Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k));
    let mut rewards = Vec::with_capacity(k);
    let mut diffs = Vec::with_capacity(k);
    let mut noise = Vec::with_capacity(k);
    let mut noise_cursor = vec![0usize; b];
    for (n, (row, e)) in cands.entries.iter().enumerate() {
        let (anchor, cand) = match e.modality {
            Modality::Y => {
                ra.push(*row);
                rp.push(b + row);
                rc.push(2 * b + cands.stack_row[n]);
                (x_emb.row(*row), cy.as_ref().expect("y candidates").row(cands.stack_row[n]))
            }
            Modality::X => {
                ra.push(b + row);
                rp.push(*row);
                rc.push(2 * b + cy_rows + cands.stack_row[n]);
                (y_emb.row(*row), cx.as_ref().expect("x candidates").row(cands.stack_row[n]))
            }
        };
        let s_pos = encoder::dot(x_emb.row(*row), y_emb.row(*row));
        let s_cand = encoder::dot(anchor, cand);
        rewards.push(crate::index::boundary_score(s_cand, s_pos));
        diffs.push(bns::difficulty(s_cand, s_pos));
        noise.push(plan.noise[*row][noise_cursor[*row]]);
        noise_cursor[*row] += 1;
    }
    let mut parts = vec![emb.0, emb.1];
    parts.extend(cands.y.map(|c| c.embeddings));
    parts.extend(cands.x.map(|c| c.embeddings));
    let all = tape.concat_rows(&parts)?;
    let mut rows = |idx: &[usize]| -> Result<Var> {
        let flat: Vec<usize> = idx.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
        let g = tape.gather(all, &flat)?;
        Ok(tape.reshape(g, &[idx.len(), d])?)
    };
    let (a, p, c) = (rows(&ra)?, rows(&rp)?, rows(&rc)?);
    let inputs = tape.concat_cols(&[a, p, c])?;
    let ac = tape.mul(a, c)?;
    let ap = tape.mul(a, p)?;
    let s_cand = tape.sum_rows(ac)?;
    let s_pos = tape.sum_rows(ap)?;
    let bs = tape.sub(s_cand, s_pos)?;
    let diff = tape.relu(bs)?;
    let noise = tape.constant(Tensor::new(vec![k, 1], noise)?);
    let segments: Vec<usize> = plan.pools.iter().map(Vec::len).filter(|&n| n > 0).collect();
    // p̃ as a function of every parameter, for the contrastive weights.
    let logits = |tape: &mut Tape, inputs: Var, diff: Var| -> Result<Var> {
        let u = bns::policy_on_tape(tape, policy, inputs)?;
        let shift = tape.scale(diff, -settings.alpha)?;
        let z = tape.add(u, shift)?;
        let z = tape.add(z, noise)?;
        Ok(tape.scale(z, 1.0 / settings.tau)?)
    };
    let z = logits(tape, inputs, diff)?;
    let probs = tape.segment_softmax(z, &segments)?;
    let log_probs = tape.segment_log_softmax(z, &segments)?;
    // J sees the encoder only through constants: its gradient reaches the
    // policy alone, and the rewards are fixed signals.
    let inputs_c = tape.detach(inputs)?;
    let diff_c = tape.detach(diff)?;
    let z_policy = logits(tape, inputs_c, diff_c)?;
    let probs_policy = tape.segment_softmax(z_policy, &segments)?;
    let r = tape.constant(Tensor::new(vec![k, 1], rewards)?);
    let weighted = tape.mul(probs_policy, r)?;
    let j_total = tape.sum(weighted)?;
    let reward = tape.scale(j_total, 1.0 / segments.len() as f64)?;
    let reward_value = tape.scalar_value(reward)?;

    let p = tape.value(probs)?.data().to_vec();
    let mut hardest = vec![None; b];
    let mut start = 0;
    for (row, pool) in plan.pools.iter().enumerate() {
        if pool.is_empty() {
            continue;
        }
        let seg = &p[start..start + pool.len()];
        let h = start + bns::argmax(seg);
        hardest[row] = Some(h);
        stats.chosen_difficulty_sum += diffs[h];
        stats.entropy_sum += bns::entropy(seg);
        start += pool.len();
    }

    // Entries that reach the contrastive loss, in anchor-major order.
    let chosen: Vec<usize> = match settings.sampled_negatives {
        None => (0..k).collect(),
        Some(count) => {
            let mut chosen = Vec::new();
            let mut start = 0;
            for pool in &plan.pools {
                let seg: Vec<usize> = (start..start + pool.len()).collect();
                let mut ranked = seg.clone();
                ranked.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
                ranked.truncate(count);
                ranked.sort_unstable();
                chosen.extend(ranked);
                start += pool.len();
            }
            chosen
        }
    };
    let weighted = settings.sampled_negatives.is_none();
    let mut extras = |modality: Modality, stack: Option<EncodedStack>| -> Result<Option<ExtraNegatives>> {
        let Some(stack) = stack else { return Ok(None) };
        let idx: Vec<usize> = chosen.iter().copied().filter(|&n| cands.entries[n].1.modality == modality).collect();
        if idx.is_empty() {
            return Ok(None);
        }
        let embeddings = if weighted {
            stack.embeddings
        } else {
            let d = tape.value(stack.embeddings)?.cols();
            let flat: Vec<usize> = idx.iter().flat_map(|&n| (cands.stack_row[n] * d)..(cands.stack_row[n] + 1) * d).collect();
            let picked = tape.gather(stack.embeddings, &flat)?;
            tape.reshape(picked, &[idx.len(), d])?
        };
        let weights = if weighted {
            Some((tape.gather(probs, &idx)?, tape.gather(log_probs, &idx)?))
        } else {
            None
        };
        Ok(Some(ExtraNegatives {
            embeddings,
            weights,
            owner: idx.iter().map(|&n| cands.entries[n].0).collect(),
        }))
    };
    let extras_xy = extras(Modality::Y, cands.y)?;
    let extras_yx = extras(Modality::X, cands.x)?;
    Ok(SamplerResult {
        reward,
        reward_value,
        extras_xy,
        extras_yx,
        hardest,
    })
}

/// Builds `L_main − λ_policy·J` for one batch.
#[allow(clippy::too_many_arguments)]
/// Row `j ≠ i` maximising `⟨x_i, y_j⟩`; ties go to the lower row.
fn hardest_in_batch(x: &Tensor, y: &Tensor, i: usize) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for j in 0..y.rows() {
        if j == i {
            continue;
        }
        let s = encoder::dot(x.row(i), y.row(j));
        if s > best.1 {
            best = (j, s);
        }
    }
    best.0
}

pub fn batch_objective(
    tape: &mut Tape,
    enc: &EncoderVars,
    policy: &PolicyVars,
    dims: &EncoderDims,
    corpus: &Corpus,
    plan: &BatchPlan,
    settings: &BatchSettings,
) -> Result<BatchObjective> {
    let b = plan.ids.len();
    let (m, l) = (dims.m_tokens, dims.l_tokens);
    let ex = encode_ids(tape, enc, corpus, &plan.ids, dims, Modality::X)?;
    let ey = encode_ids(tape, enc, corpus, &plan.ids, dims, Modality::Y)?;
    let x_emb = tape.value(ex.embeddings)?.clone();
    let y_emb = tape.value(ey.embeddings)?.clone();
    let mut stats = BatchStats {
        rows: b,
        ..Default::default()
    };

    let mut cands = None;
    let mut sampler = None;
    if settings.use_sampler {
        stats.anchors_with_pool = plan.pools.iter().filter(|p| !p.is_empty()).count();
        stats.fallbacks = b - stats.anchors_with_pool;
        stats.pool_size_sum = plan.pools.iter().map(Vec::len).sum();
        if stats.anchors_with_pool > 0 {
            let c = encode_candidates(tape, enc, corpus, dims, plan)?;
            sampler = Some(run_sampler(tape, policy, &c, plan, (ex.embeddings, ey.embeddings), &x_emb, &y_emb, settings, &mut stats)?);
            cands = Some(c);
        }
    }

    let contrast = match settings.loss {
        ContrastForm::Infonce { tau } => cla::symmetric_info_nce_on_tape(
            tape,
            ex.embeddings,
            ey.embeddings,
            tau,
            sampler.as_ref().and_then(|s| s.extras_xy.as_ref()),
            sampler.as_ref().and_then(|s| s.extras_yx.as_ref()),
        )?,
        ContrastForm::Triplet { margin } => cla::symmetric_triplet_on_tape(
            tape,
            ex.embeddings,
            ey.embeddings,
            margin,
            sampler.as_ref().and_then(|s| s.extras_xy.as_ref()),
            sampler.as_ref().and_then(|s| s.extras_yx.as_ref()),
        )?,
    };
    let l_contrast = tape.scalar_value(contrast)?;

    let mut main = contrast;
    let mut l_local = 0.0;
    if settings.use_local {
        let mut locals = Vec::with_capacity(b);
        for i in 0..b {
            let xs = token_slice(tape, ex.states, i, m)?;
            let ys = token_slice(tape, ey.states, i, l)?;
            let a_pos = encoder::attention_on_tape(tape, enc, xs, ys, dims.d_attn)?;
            let hardest = sampler.as_ref().and_then(|s| s.hardest[i]);
            let (a_neg, neg_id, swapped) = match (hardest, cands.as_ref()) {
                (Some(h), Some(c)) => {
                    let (_, e) = &c.entries[h];
                    let r = c.stack_row[h];
                    let a = match e.modality {
                        Modality::Y => {
                            let ys_neg = token_slice(tape, c.y.expect("y candidates").states, r, l)?;
                            encoder::attention_on_tape(tape, enc, xs, ys_neg, dims.d_attn)?
                        }
                        Modality::X => {
                            let xs_neg = token_slice(tape, c.x.expect("x candidates").states, r, m)?;
                            encoder::attention_on_tape(tape, enc, xs_neg, ys, dims.d_attn)?
                        }
                    };
                    (a, e.entry.candidate_id, e.modality)
                }
                _ => {
                    let j = match settings.local_negative {
                        LocalNegative::Uniform => plan.fallback[i],
                        LocalNegative::HardestInBatch => hardest_in_batch(&x_emb, &y_emb, i),
                    };
                    let ys_neg = token_slice(tape, ey.states, j, l)?;
                    (encoder::attention_on_tape(tape, enc, xs, ys_neg, dims.d_attn)?, plan.ids[j], Modality::Y)
                }
            };
            let delta = cla::delta_map(tape.value(a_pos)?, tape.value(a_neg)?)?;
            stats.delta_mean_sum += delta.sum() / delta.numel() as f64;
            stats.delta_count += 1;
            if let Some(pos) = corpus.planted_positions(plan.ids[i], neg_id, swapped) {
                if !pos.is_empty() {
                    stats.ael_sum += cla::ael_coverage(&delta, &pos, AEL_TOP_FRAC)?;
                    stats.ael_count += 1;
                }
            }
            // Per-cell average, so the weight does not scale with N².
            let (loss, omega) = cla::local_loss_on_tape(tape, a_pos, a_neg, settings.beta, settings.q_frac)?;
            locals.push(tape.scale(loss, 1.0 / omega.len() as f64)?);
        }
        let stacked = tape.concat_cols(&locals)?;
        let local = tape.mean(stacked)?;
        l_local = tape.scalar_value(local)?;
        let weighted = tape.scale(local, settings.lambda_local)?;
        main = tape.add(contrast, weighted)?;
    }
    let breakdown = cla::main_loss(l_contrast, l_local, settings.lambda_local)?;

    let objective = match &sampler {
        Some(s) => {
            stats.reward = Some(s.reward_value);
            let scaled = tape.scale(s.reward, settings.lambda_policy)?;
            tape.sub(main, scaled)?
        }
        None => main,
    };
    Ok(BatchObjective {
        objective,
        breakdown,
        stats,
    })
}
