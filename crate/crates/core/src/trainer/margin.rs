//! Worst-case margin over a fixed probe set and the quantities reported
//! next to it.

use rand::seq::SliceRandom;

use crate::bns::{self, ScheduleParams};
use crate::encoder::{self, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::index::rank_order;
use crate::seed;
use crate::synthdata::Corpus;

/// Mean over probes of `positive − max(hard)`.
pub fn margin_from_similarities(positive: &[f64], hard: &[Vec<f64>]) -> Result<f64> {
    if positive.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    if positive.len() != hard.len() {
        return Err(Error::LengthMismatch {
            op: "margin_delta",
            left: positive.len(),
            right: hard.len(),
        });
    }
    let mut total = 0.0;
    for (p, h) in positive.iter().zip(hard) {
        let worst = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if h.is_empty() {
            return Err(Error::Empty("hard-negative set"));
        }
        total += p - worst;
    }
    Ok(total / positive.len() as f64)
}

/// `Δ = mean_p [ s(x_p, y_p) − max_{z ∈ H_p} s(x_p, y_z) ]`.
pub fn margin_delta(params: &EncoderParams, corpus: &Corpus, probes: &[usize], hard_sets: &[Vec<usize>]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Empty("probe set"));
    }
    if probes.len() != hard_sets.len() {
        return Err(Error::LengthMismatch {
            op: "margin_delta",
            left: probes.len(),
            right: hard_sets.len(),
        });
    }
    let mut positive = Vec::with_capacity(probes.len());
    let mut hard = Vec::with_capacity(probes.len());
    for (&p, set) in probes.iter().zip(hard_sets) {
        let x = encoder::encode(params, &corpus.samples[p], Modality::X)?;
        let y = encoder::encode(params, &corpus.samples[p], Modality::Y)?;
        positive.push(encoder::similarity(&x, &y));
        let mut sims = Vec::with_capacity(set.len());
        for &z in set {
            let yz = encoder::encode(params, &corpus.samples[z], Modality::Y)?;
            sims.push(encoder::similarity(&x, &yz));
        }
        hard.push(sims);
    }
    margin_from_similarities(&positive, &hard)
}

pub fn select_probes(n: usize, count: usize, root: u64) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut seed::stream(root, "probes"));
    ids.truncate(count.min(n));
    ids
}

/// For each probe, the `size` non-matching `y` with the highest boundary
/// score, i.e. the highest similarity to the probe's `x`.
pub fn select_hard_sets(params: &EncoderParams, corpus: &Corpus, probes: &[usize], size: usize) -> Result<Vec<Vec<usize>>> {
    let ey = encoder::encode_all(params, &corpus.samples, Modality::Y)?;
    probes
        .iter()
        .map(|&p| {
            let x = encoder::encode(params, &corpus.samples[p], Modality::X)?;
            let mut sims: Vec<(usize, f64)> = (0..corpus.len())
                .filter(|&j| j != p)
                .map(|j| (j, encoder::dot(&x.vector, ey.row(j))))
                .collect();
            sims.sort_by(|&a, &b| rank_order(a, b));
            Ok(sims.into_iter().take(size).map(|(j, _)| j).collect())
        })
        .collect()
}

/// `(1/B)·Σ_{t=1}^{η} α(t)`.
pub fn bar_alpha(schedule: &ScheduleParams, eta: usize, batch_size: usize) -> f64 {
    (1..=eta).map(|t| bns::alpha(schedule, t as f64)).sum::<f64>() / batch_size as f64
}

/// `κ = η_lr·β·(m − ε) / (2L)`.
pub fn kappa(lr: f64, beta: f64, margin: f64, epsilon: f64, lipschitz: f64) -> f64 {
    lr * beta * (margin - epsilon) / (2.0 * lipschitz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_cases() {
        assert!((margin_from_similarities(&[0.9], &[vec![0.7, 0.1]]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(margin_from_similarities(&[0.4], &[vec![0.4]]).unwrap(), 0.0);
        assert!(margin_from_similarities(&[], &[]).is_err());
        assert!(margin_from_similarities(&[0.4], &[vec![]]).is_err());
    }

    #[test]
    fn bar_alpha_sums_schedule() {
        let s = ScheduleParams::flat_zero(3.0);
        assert_eq!(bar_alpha(&s, 5, 4), 0.0);
        let s = crate::bns::SchedulePreset::Default.with_eta0(2.0);
        let direct = (bns::alpha(&s, 1.0) + bns::alpha(&s, 2.0) + bns::alpha(&s, 3.0)) / 8.0;
        assert_eq!(bar_alpha(&s, 3, 8), direct);
    }

    #[test]
    fn kappa_formula() {
        assert!((kappa(0.1, 2.0, 0.5, 0.2, 3.0) - 0.1 * 2.0 * 0.3 / 6.0).abs() < 1e-15);
    }
}
