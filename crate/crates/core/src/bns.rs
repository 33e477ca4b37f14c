//! Boundary-aware negative sampler: policy scores, the logistic curriculum,
//! Gumbel-Softmax relaxation and the reward objective.

use bacl_numerics::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleParams {
    pub alpha_early: f64,
    pub alpha_late: f64,
    pub gamma: f64,
    pub eta0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulePreset {
    Shallow,
    Default,
    Aggressive,
}

impl SchedulePreset {
    pub const ALL: [SchedulePreset; 3] = [SchedulePreset::Shallow, SchedulePreset::Default, SchedulePreset::Aggressive];

    /// `(α_early, α_late, γ)`.
    pub fn triple(self) -> (f64, f64, f64) {
        match self {
            SchedulePreset::Shallow => (0.1, -0.2, 1.0),
            SchedulePreset::Default => (0.3, -0.5, 1.5),
            SchedulePreset::Aggressive => (0.5, -0.8, 2.5),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SchedulePreset::Shallow => "shallow",
            SchedulePreset::Default => "default",
            SchedulePreset::Aggressive => "aggressive",
        }
    }

    pub fn with_eta0(self, eta0: f64) -> ScheduleParams {
        let (alpha_early, alpha_late, gamma) = self.triple();
        ScheduleParams {
            alpha_early,
            alpha_late,
            gamma,
            eta0,
        }
    }
}

impl ScheduleParams {
    /// The default schedule centred at 40% of `epochs`.
    pub fn default_for(epochs: usize) -> Self {
        SchedulePreset::Default.with_eta0(0.4 * epochs as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::config(format!("schedule gamma must be positive, got {}", self.gamma)));
        }
        if !self.alpha_early.is_finite() || !self.alpha_late.is_finite() || !self.eta0.is_finite() {
            return Err(Error::config("schedule parameters must be finite"));
        }
        Ok(())
    }

    /// A schedule that is zero at every epoch.
    pub fn flat_zero(eta0: f64) -> Self {
        Self {
            alpha_early: 0.0,
            alpha_late: 0.0,
            gamma: 1.0,
            eta0,
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `α(η) = α_early + (α_late − α_early)·logistic(γ(η − η0))`.
pub fn alpha(schedule: &ScheduleParams, eta: f64) -> f64 {
    let w = logistic(schedule.gamma * (eta - schedule.eta0));
    schedule.alpha_early + (schedule.alpha_late - schedule.alpha_early) * w
}

/// `max(0, s(anchor, candidate) − s(anchor, positive))`.
pub fn difficulty(sim_anchor_candidate: f64, sim_anchor_positive: f64) -> f64 {
    (sim_anchor_candidate - sim_anchor_positive).max(0.0)
}

/// `û_n = u_n − α·d_n`.
pub fn adjust_scores(u: &[f64], d: &[f64], alpha_eta: f64) -> Result<Vec<f64>> {
    if u.len() != d.len() {
        return Err(Error::LengthMismatch {
            op: "adjust_scores",
            left: u.len(),
            right: d.len(),
        });
    }
    Ok(u.iter().zip(d).map(|(u, d)| u - alpha_eta * d).collect())
}

/// `τ` on a linear anneal from `start` at the first epoch to `end` at the last.
pub fn tau_at(start: f64, end: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return start;
    }
    let t = (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64;
    start + (end - start) * t
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SamplerOutput {
    pub probs: Vec<f64>,
    pub hardest_index: usize,
    pub adjusted_scores: Vec<f64>,
    pub gumbel_noise: Vec<f64>,
    pub temperature: f64,
}

/// `n` draws of `−log(−log U)`, `U ~ Uniform(0, 1)`.
pub fn gumbel_noise<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            -(-u.ln()).ln()
        })
        .collect()
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-Softmax with caller-supplied noise; pass zeros for the
/// noise-free mode.
pub fn gumbel_softmax_with_noise(adjusted: &[f64], tau: f64, noise: &[f64]) -> Result<SamplerOutput> {
    if adjusted.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    if noise.len() != adjusted.len() {
        return Err(Error::LengthMismatch {
            op: "gumbel_softmax",
            left: adjusted.len(),
            right: noise.len(),
        });
    }
    let z: Vec<f64> = adjusted.iter().zip(noise).map(|(u, g)| (u + g) / tau).collect();
    let probs = softmax(&z);
    Ok(SamplerOutput {
        hardest_index: argmax(&probs),
        probs,
        adjusted_scores: adjusted.to_vec(),
        gumbel_noise: noise.to_vec(),
        temperature: tau,
    })
}

pub fn gumbel_softmax<R: Rng>(adjusted: &[f64], tau: f64, rng: &mut R) -> Result<SamplerOutput> {
    let noise = gumbel_noise(adjusted.len(), rng);
    gumbel_softmax_with_noise(adjusted, tau, &noise)
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// `J = Σ p̃_n R_n`.
pub fn reward_objective(probs: &[f64], rewards: &[f64]) -> Result<f64> {
    if probs.len() != rewards.len() {
        return Err(Error::LengthMismatch {
            op: "reward_objective",
            left: probs.len(),
            right: rewards.len(),
        });
    }
    Ok(probs.iter().zip(rewards).map(|(p, r)| p * r).sum())
}

/// Two affine layers with a SiLU between them. Input rows are
/// `[anchor ; positive ; candidate]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    /// `3·d_embed × hidden`.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `hidden × 1`.
    pub w2: Tensor,
    pub b2: Tensor,
}

impl PolicyParams {
    pub fn init<R: Rng>(d_embed: usize, hidden: usize, rng: &mut R) -> Self {
        let mut draw = |rows: usize, cols: usize, std: f64| {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect();
            Tensor::new(vec![rows, cols], data).expect("finite")
        };
        let w1 = draw(3 * d_embed, hidden, (1.0 / (3 * d_embed) as f64).sqrt());
        let w2 = draw(hidden, 1, (1.0 / hidden as f64).sqrt());
        Self {
            w1,
            b1: Tensor::zeros(&[1, hidden]),
            w2,
            b2: Tensor::zeros(&[1, 1]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn from_tensors(tensors: [Tensor; 4]) -> Result<Self> {
        let [w1, b1, w2, b2] = tensors;
        let h = w1.cols();
        if b1.shape() != [1, h] || w2.shape() != [h, 1] || b2.shape() != [1, 1] || w1.rows() % 3 != 0 {
            return Err(Error::config("policy tensors have inconsistent shapes"));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn register(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            w1: tape.param(self.w1.clone()),
            b1: tape.param(self.b1.clone()),
            w2: tape.param(self.w2.clone()),
            b2: tape.param(self.b2.clone()),
        }
    }

    pub fn register_frozen(&self, tape: &mut Tape) -> PolicyVars {
        PolicyVars {
            w1: tape.constant(self.w1.clone()),
            b1: tape.constant(self.b1.clone()),
            w2: tape.constant(self.w2.clone()),
            b2: tape.constant(self.b2.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl PolicyVars {
    pub fn all(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Raw scores `u` (`n × 1`) for `n` stacked policy inputs.
pub fn policy_on_tape(tape: &mut Tape, vars: &PolicyVars, inputs: Var) -> Result<Var> {
    let h = tape.matmul(inputs, vars.w1)?;
    let h = tape.add_row(h, vars.b1)?;
    let h = tape.silu(h)?;
    let o = tape.matmul(h, vars.w2)?;
    Ok(tape.add_row(o, vars.b2)?)
}

/// Stacks `[anchor ; positive ; candidate]` rows.
pub fn policy_inputs(anchor: &[f64], positive: &[f64], candidates: &[&[f64]]) -> Result<Tensor> {
    let d = anchor.len();
    if positive.len() != d || candidates.iter().any(|c| c.len() != d) {
        return Err(Error::LengthMismatch {
            op: "policy_inputs",
            left: d,
            right: positive.len(),
        });
    }
    let mut data = Vec::with_capacity(candidates.len() * 3 * d);
    for c in candidates {
        data.extend_from_slice(anchor);
        data.extend_from_slice(positive);
        data.extend_from_slice(c);
    }
    Ok(Tensor::new(vec![candidates.len(), 3 * d], data)?)
}

pub fn policy_score(policy: &PolicyParams, anchor: &[f64], positive: &[f64], candidates: &[&[f64]]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    let inputs = policy_inputs(anchor, positive, candidates)?;
    if inputs.cols() != policy.input_dim() {
        return Err(Error::LengthMismatch {
            op: "policy_score",
            left: inputs.cols(),
            right: policy.input_dim(),
        });
    }
    let mut tape = Tape::new();
    let vars = policy.register_frozen(&mut tape);
    let x = tape.constant(inputs);
    let u = policy_on_tape(&mut tape, &vars, x)?;
    Ok(tape.value(u)?.data().to_vec())
}

/// Monte-Carlo mean and standard error of the difficulty of the argmax
/// candidate under `draws` independent noise vectors.
pub fn sampled_difficulty<R: Rng>(
    u: &[f64],
    d: &[f64],
    alpha_eta: f64,
    tau: f64,
    draws: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if draws < 2 {
        return Err(Error::config("need at least two draws"));
    }
    let adjusted = adjust_scores(u, d, alpha_eta)?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let out = gumbel_softmax(&adjusted, tau, rng)?;
        let v = d[out.hardest_index];
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha_midpoint_and_asymptotes() {
        let s = SchedulePreset::Default.with_eta0(8.0);
        assert!((alpha(&s, 8.0) - (-0.1)).abs() < 1e-12);
        assert!((alpha(&s, -1e6) - 0.3).abs() < 1e-12);
        assert!((alpha(&s, 1e6) + 0.5).abs() < 1e-12);
        for eta in [0.0, 3.0, 7.9, 8.1, 20.0] {
            let a = alpha(&s, eta);
            assert!(a < 0.3 && a > -0.5);
        }
    }

    #[test]
    fn difficulty_cases() {
        assert_eq!(difficulty(0.1, 0.5), 0.0);
        assert!((difficulty(0.8, 0.6) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn adjust_cases() {
        assert_eq!(adjust_scores(&[1.0, 2.0], &[0.3, 0.4], 0.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(adjust_scores(&[1.0, 2.0], &[0.0, 0.0], 0.7).unwrap(), vec![1.0, 2.0]);
        assert_eq!(adjust_scores(&[1.0, 1.0], &[0.0, 0.5], -0.5).unwrap(), vec![1.0, 1.25]);
        assert!(adjust_scores(&[1.0], &[0.0, 0.5], -0.5).is_err());
    }

    #[test]
    fn gumbel_softmax_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(gumbel_softmax(&[0.4], 0.5, &mut rng).unwrap().probs, vec![1.0]);
        let out = gumbel_softmax_with_noise(&[0.2; 4], 0.3, &[0.0; 4]).unwrap();
        assert!(out.probs.iter().all(|p| (p - 0.25).abs() < 1e-15));
        assert!(gumbel_softmax(&[], 0.5, &mut rng).is_err());
        assert!(gumbel_softmax(&[1.0], 0.0, &mut rng).is_err());
    }

    #[test]
    fn tau_anneal_endpoints() {
        assert_eq!(tau_at(0.7, 0.1, 0, 20), 0.7);
        assert!((tau_at(0.7, 0.1, 19, 20) - 0.1).abs() < 1e-15);
        assert_eq!(tau_at(0.7, 0.1, 0, 1), 0.7);
    }

    #[test]
    fn reward_cases() {
        let r = [0.2, -0.4, 0.1];
        let uniform = [1.0 / 3.0; 3];
        assert!((reward_objective(&uniform, &r).unwrap() - (-0.1 / 3.0)).abs() < 1e-15);
        assert_eq!(reward_objective(&[0.0, 1.0, 0.0], &r).unwrap(), -0.4);
        assert!(reward_objective(&[1.0], &r).is_err());
    }

    #[test]
    fn zero_policy_scores_equal_bias() {
        let mut p = PolicyParams::init(2, 4, &mut ChaCha8Rng::seed_from_u64(1));
        p.w1 = Tensor::zeros(&[6, 4]);
        p.w2 = Tensor::zeros(&[4, 1]);
        p.b2 = Tensor::scalar(0.37).unwrap();
        let c1 = [0.1, 0.2];
        let c2 = [0.9, -0.3];
        let u = policy_score(&p, &[1.0, 0.0], &[0.0, 1.0], &[&c1, &c2]).unwrap();
        assert_eq!(u, vec![0.37, 0.37]);
    }
}
