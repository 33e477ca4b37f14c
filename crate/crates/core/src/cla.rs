//! Contrastive local attention and the global contrastive objectives.
//!
//! For an anchor with positive attention map `A⁺` and hardest-negative map
//! `A⁻`:
//!
//! ```text
//! ΔA      = |A⁺ − A⁻|
//! A^b     = A⁻ ⊙ (1 + β·ΔA)
//! Ω       = global top ⌈q·N²⌉ cells of ΔA, ties in row-major order
//! L_local = Σ_Ω −log(max(A^b, 1e-8))
//! L_main  = L_contrast + λ_local·L_local
//! ```

use bacl_numerics::{Tape, Tensor, Var};
use serde::Serialize;

use crate::error::{Error, Result};

pub const LOCAL_FLOOR: f64 = 1e-8;

pub fn delta_map(a_pos: &Tensor, a_neg: &Tensor) -> Result<Tensor> {
    Ok(a_pos.zip_map(a_neg, "delta_map", |p, n| (p - n).abs())?)
}

pub fn boost(a_neg: &Tensor, delta: &Tensor, beta: f64) -> Result<Tensor> {
    if !(beta >= 0.0) {
        return Err(Error::config(format!("beta must be nonnegative, got {beta}")));
    }
    Ok(a_neg.zip_map(delta, "boost", |a, d| a * (1.0 + beta * d))?)
}

/// `⌈q·n⌉`, robust to `q·n` landing a rounding error above an integer.
pub fn omega_size(n_cells: usize, q_frac: f64) -> usize {
    let raw = q_frac * n_cells as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    k.clamp(1, n_cells)
}

fn check_fraction(q: f64, what: &str) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::config(format!("{what} must lie in (0, 1], got {q}")));
    }
    Ok(())
}

/// Flat row-major indices of the top cells of `values`; larger first, equal
/// values by ascending index.
fn top_cells(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Ω as flat row-major indices, in selection order.
pub fn select_omega(delta: &Tensor, q_frac: f64) -> Result<Vec<usize>> {
    check_fraction(q_frac, "q_frac")?;
    delta.dims2()?;
    if delta.numel() == 0 {
        return Err(Error::Empty("attention map"));
    }
    Ok(top_cells(delta.data(), omega_size(delta.numel(), q_frac)))
}

pub fn local_loss(a_boosted: &Tensor, omega: &[usize]) -> Result<f64> {
    if omega.is_empty() {
        return Err(Error::Empty("omega"));
    }
    let mut total = 0.0;
    for &c in omega {
        let v = *a_boosted.data().get(c).ok_or(Error::config(format!("omega cell {c} out of range")))?;
        total += -(v.max(LOCAL_FLOOR)).ln();
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionBundle {
    pub a_pos: Tensor,
    pub a_neg: Tensor,
    pub delta: Tensor,
    pub a_boosted: Tensor,
    pub omega: Vec<usize>,
    pub beta: f64,
    pub q_frac: f64,
}

impl AttentionBundle {
    pub fn new(a_pos: Tensor, a_neg: Tensor, beta: f64, q_frac: f64) -> Result<Self> {
        let delta = delta_map(&a_pos, &a_neg)?;
        let a_boosted = boost(&a_neg, &delta, beta)?;
        let omega = select_omega(&delta, q_frac)?;
        Ok(Self {
            a_pos,
            a_neg,
            delta,
            a_boosted,
            omega,
            beta,
            q_frac,
        })
    }

    pub fn local_loss(&self) -> Result<f64> {
        local_loss(&self.a_boosted, &self.omega)
    }

    /// `(i, j)` coordinates of Ω.
    pub fn omega_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.delta.cols();
        self.omega.iter().map(|&c| (c / n, c % n)).collect()
    }
}

/// Records `L_local` for one anchor on the tape. Ω is chosen from the
/// current values of ΔA and treated as fixed. Returns the loss and Ω.
pub fn local_loss_on_tape(tape: &mut Tape, a_pos: Var, a_neg: Var, beta: f64, q_frac: f64) -> Result<(Var, Vec<usize>)> {
    let diff = tape.sub(a_pos, a_neg)?;
    let delta = tape.abs(diff)?;
    let omega = select_omega(tape.value(delta)?, q_frac)?;
    let gain = tape.scale(delta, beta)?;
    let gain = tape.add_scalar(gain, 1.0)?;
    let boosted = tape.mul(a_neg, gain)?;
    let picked = tape.gather(boosted, &omega)?;
    let clamped = tape.clamp_min(picked, LOCAL_FLOOR)?;
    let logs = tape.log(clamped)?;
    let total = tape.sum(logs)?;
    Ok((tape.neg(total)?, omega))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_contrast: f64,
    pub l_local: f64,
    pub lambda_local: f64,
    pub l_main: f64,
}

pub fn main_loss(l_contrast: f64, l_local: f64, lambda_local: f64) -> Result<LossBreakdown> {
    if !(lambda_local >= 0.0) {
        return Err(Error::config(format!("lambda_local must be nonnegative, got {lambda_local}")));
    }
    Ok(LossBreakdown {
        l_contrast,
        l_local,
        lambda_local,
        l_main: l_contrast + lambda_local * l_local,
    })
}

/// Sampler-weighted negatives appended to some rows of one retrieval
/// direction.
#[derive(Clone, Debug)]
pub struct ExtraNegatives {
    /// Candidate embeddings, `K × d`.
    pub embeddings: Var,
    /// Sampler probabilities `p̃` and `log p̃`, `K` entries each in any
    /// shape. Without them every candidate counts as one whole negative.
    pub weights: Option<(Var, Var)>,
    /// Batch row that receives each candidate.
    pub owner: Vec<usize>,
}

struct DirectionLogits {
    /// `B × B` similarities, row = anchor.
    sims: Var,
    /// `1 × K` anchor-to-candidate similarities, aligned with `owner`.
    extra_sims: Option<Var>,
}

fn direction_logits(tape: &mut Tape, anchors: Var, positives: Var, extras: Option<&ExtraNegatives>) -> Result<DirectionLogits> {
    let (b, _) = tape.value(anchors)?.dims2()?;
    if tape.value(positives)?.rows() != b {
        return Err(Error::LengthMismatch {
            op: "contrastive_loss",
            left: b,
            right: tape.value(positives)?.rows(),
        });
    }
    let pt = tape.transpose(positives)?;
    let sims = tape.matmul(anchors, pt)?;
    let extra_sims = match extras {
        Some(e) if !e.owner.is_empty() => {
            let k = e.owner.len();
            let weights_ok = match e.weights {
                Some((p, lp)) => tape.value(p)?.numel() == k && tape.value(lp)?.numel() == k,
                None => true,
            };
            if tape.value(e.embeddings)?.rows() != k || !weights_ok {
                return Err(Error::LengthMismatch {
                    op: "extra negatives",
                    left: k,
                    right: tape.value(e.embeddings)?.rows(),
                });
            }
            if let Some(&bad) = e.owner.iter().find(|&&o| o >= b) {
                return Err(Error::config(format!("extra negative owner {bad} outside batch of {b}")));
            }
            let ct = tape.transpose(e.embeddings)?;
            let all = tape.matmul(anchors, ct)?;
            let picks: Vec<usize> = e.owner.iter().enumerate().map(|(c, &o)| o * k + c).collect();
            Some(tape.gather(all, &picks)?)
        }
        _ => None,
    };
    Ok(DirectionLogits { sims, extra_sims })
}

/// One direction of InfoNCE, averaged over rows. Weighted extra negatives
/// enter their owner's log-sum-exp as `s/τ + log p̃`, i.e. the sampler's
/// expected contribution of one drawn negative; unweighted ones as `s/τ`.
pub fn info_nce_on_tape(tape: &mut Tape, anchors: Var, positives: Var, tau: f64, extras: Option<&ExtraNegatives>) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("contrastive temperature must be positive, got {tau}")));
    }
    let b = tape.value(anchors)?.rows();
    if b < 2 {
        return Err(Error::config(format!("contrastive loss needs at least 2 pairs, got {b}")));
    }
    let logits = direction_logits(tape, anchors, positives, extras)?;
    let scaled = tape.scale(logits.sims, 1.0 / tau)?;
    let flat = tape.reshape(scaled, &[1, b * b])?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let positive_logits = tape.gather(flat, &diag)?;

    let (pool, order, segments) = match (logits.extra_sims, extras) {
        (Some(es), Some(e)) => {
            let k = e.owner.len();
            let es = tape.scale(es, 1.0 / tau)?;
            let extra_logits = match e.weights {
                Some((_, lp)) => {
                    let lp = tape.reshape(lp, &[1, k])?;
                    tape.add(es, lp)?
                }
                None => es,
            };
            let pool = tape.concat_cols(&[flat, extra_logits])?;
            let mut order = Vec::with_capacity(b * b + k);
            let mut segments = Vec::with_capacity(b);
            for i in 0..b {
                order.extend(i * b..(i + 1) * b);
                let mine: Vec<usize> = (0..k).filter(|&c| e.owner[c] == i).map(|c| b * b + c).collect();
                segments.push(b + mine.len());
                order.extend(mine);
            }
            (pool, order, segments)
        }
        _ => (flat, (0..b * b).collect(), vec![b; b]),
    };
    let arranged = tape.gather(pool, &order)?;
    let lse = tape.segment_logsumexp(arranged, &segments)?;
    let per_row = tape.sub(lse, positive_logits)?;
    Ok(tape.mean(per_row)?)
}

/// `½(L_{x→y} + L_{y→x})`.
pub fn symmetric_info_nce_on_tape(
    tape: &mut Tape,
    x: Var,
    y: Var,
    tau: f64,
    extras_xy: Option<&ExtraNegatives>,
    extras_yx: Option<&ExtraNegatives>,
) -> Result<Var> {
    let a = info_nce_on_tape(tape, x, y, tau, extras_xy)?;
    let b = info_nce_on_tape(tape, y, x, tau, extras_yx)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5)?)
}

/// One direction of the triplet-margin loss, averaged over rows. Each row
/// pays `relu(m − s⁺ + s_hard)` for its hardest in-batch negative plus
/// `Σ w_n relu(m − s⁺ + s_n)` over any extra negatives it owns, with
/// `w = p̃` when weighted and 1 otherwise.
pub fn triplet_on_tape(tape: &mut Tape, anchors: Var, positives: Var, margin: f64, extras: Option<&ExtraNegatives>) -> Result<Var> {
    let b = tape.value(anchors)?.rows();
    if b < 2 {
        return Err(Error::config(format!("triplet loss needs at least 2 pairs, got {b}")));
    }
    let logits = direction_logits(tape, anchors, positives, extras)?;
    let sims = tape.value(logits.sims)?.clone();
    let flat = tape.reshape(logits.sims, &[1, b * b])?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let hardest: Vec<usize> = (0..b)
        .map(|i| {
            let j = (0..b)
                .filter(|&j| j != i)
                .fold(None, |best: Option<usize>, j| match best {
                    Some(bj) if sims.at(i, bj) >= sims.at(i, j) => Some(bj),
                    _ => Some(j),
                })
                .expect("batch has at least two rows");
            i * b + j
        })
        .collect();
    let pos = tape.gather(flat, &diag)?;
    let neg = tape.gather(flat, &hardest)?;
    let gap = tape.sub(neg, pos)?;
    let gap = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(gap)?;
    let mut total = tape.sum(hinge)?;
    if let (Some(es), Some(e)) = (logits.extra_sims, extras) {
        let k = e.owner.len();
        let owner_pos = tape.gather(flat, &e.owner.iter().map(|&o| o * b + o).collect::<Vec<_>>())?;
        let g = tape.sub(es, owner_pos)?;
        let g = tape.add_scalar(g, margin)?;
        let h = tape.relu(g)?;
        let weighted = match e.weights {
            Some((p, _)) => {
                let p = tape.reshape(p, &[1, k])?;
                tape.mul(h, p)?
            }
            None => h,
        };
        let extra = tape.sum(weighted)?;
        total = tape.add(total, extra)?;
    }
    Ok(tape.scale(total, 1.0 / b as f64)?)
}

pub fn symmetric_triplet_on_tape(
    tape: &mut Tape,
    x: Var,
    y: Var,
    margin: f64,
    extras_xy: Option<&ExtraNegatives>,
    extras_yx: Option<&ExtraNegatives>,
) -> Result<Var> {
    let a = triplet_on_tape(tape, x, y, margin, extras_xy)?;
    let b = triplet_on_tape(tape, y, x, margin, extras_yx)?;
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, 0.5)?)
}

/// Symmetric InfoNCE over unit embeddings with in-batch negatives only.
pub fn contrastive_loss(x_emb: &Tensor, y_emb: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(x_emb.clone());
    let y = tape.constant(y_emb.clone());
    let l = symmetric_info_nce_on_tape(&mut tape, x, y, tau, None, None)?;
    Ok(tape.scalar_value(l)?)
}

/// Fraction of planted mismatch positions whose row or column meets one of
/// the top `⌈top_frac·N²⌉` cells of the (min-max normalised) discrepancy map.
pub fn ael_coverage(delta: &Tensor, planted: &[usize], top_frac: f64) -> Result<f64> {
    if planted.is_empty() {
        return Err(Error::Empty("planted mismatch mask"));
    }
    check_fraction(top_frac, "top_frac")?;
    let (r, c) = delta.dims2()?;
    let lo = delta.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = delta.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let normalised: Vec<f64> = delta
        .data()
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    let top = top_cells(&normalised, omega_size(r * c, top_frac));
    let covered = planted
        .iter()
        .filter(|&&p| top.iter().any(|&cell| cell / c == p || cell % c == p))
        .count();
    Ok(covered as f64 / planted.len() as f64)
}
