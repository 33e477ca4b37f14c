use serde::{Deserialize, Serialize};

use crate::bns::ScheduleParams;
use crate::error::{Error, Result};

/// Which mechanisms a run enables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// In-batch negatives only.
    Baseline,
    /// Sampler negatives in the contrastive loss, no local loss.
    Bns,
    /// Local loss against an in-batch negative.
    Cla,
    /// Both: the local loss uses the sampler's hardest negative.
    Bacl,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Bns, Arm::Cla, Arm::Bacl];

    pub fn uses_sampler(self) -> bool {
        matches!(self, Arm::Bns | Arm::Bacl)
    }

    pub fn uses_local(self) -> bool {
        matches!(self, Arm::Cla | Arm::Bacl)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Bns => "bns",
            Arm::Cla => "cla",
            Arm::Bacl => "bacl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd,
    /// Adaptive moments with decoupled weight decay.
    Adamw {
        weight_decay: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adamw {
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ContrastForm {
    /// Symmetric InfoNCE with temperature `tau`.
    Infonce { tau: f64 },
    /// Symmetric hinge on similarity gaps with margin `margin`.
    Triplet { margin: f64 },
}

impl Default for ContrastForm {
    fn default() -> Self {
        ContrastForm::Infonce { tau: 0.1 }
    }
}

/// Negative paired with an anchor in the local loss when no sampler
/// candidate is available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalNegative {
    /// The batch's uniformly drawn fallback partner.
    Uniform,
    /// The in-batch `y` most similar to the anchor.
    #[default]
    HardestInBatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HardSetMode {
    /// Chosen once after warm-up.
    #[default]
    Fixed,
    /// Re-chosen with the current encoder before every measurement.
    Reselect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Main-loop epochs after warm-up.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    /// Candidate margin ε for retrieval.
    pub epsilon: f64,
    pub k_max: usize,
    /// `None` resolves to the default schedule centred at 40% of `epochs`.
    pub schedule: Option<ScheduleParams>,
    pub tau_start: f64,
    pub tau_end: f64,
    pub beta: f64,
    pub lambda_local: f64,
    pub lambda_policy: f64,
    pub q_frac: f64,
    pub loss: ContrastForm,
    /// How sampler candidates enter the contrastive loss: `None` weights
    /// every candidate by `p̃`, `Some(k)` adds each anchor's `k` most
    /// probable candidates as whole negatives.
    pub sampled_negatives: Option<usize>,
    pub local_negative: LocalNegative,
    pub optimizer: OptimizerConfig,
    pub arm: Arm,
    /// Treat every candidate pool as empty.
    pub force_uniform_fallback: bool,
    /// Zero Gumbel noise.
    pub noise_free: bool,
    pub reindex_every: Option<usize>,
    pub hard_set: HardSetMode,
    pub probe_anchors: usize,
    pub hard_set_size: usize,
    /// Margin `m` used in the κ report when the loss is not the triplet form.
    pub report_margin: f64,
    pub lipschitz_probes: usize,
    pub d_embed: usize,
    pub d_attn: usize,
    pub policy_hidden: usize,
    /// Write a checkpoint every this many epochs; the final epoch is always
    /// written when a checkpoint directory is given.
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 1e-2,
            warmup_epochs: 2,
            epsilon: 0.2,
            k_max: 10,
            schedule: None,
            tau_start: 0.7,
            tau_end: 0.1,
            beta: 2.0,
            lambda_local: 0.3,
            lambda_policy: 1.0,
            q_frac: 0.15,
            loss: ContrastForm::default(),
            sampled_negatives: Some(3),
            local_negative: LocalNegative::default(),
            optimizer: OptimizerConfig::default(),
            arm: Arm::Bacl,
            force_uniform_fallback: false,
            noise_free: false,
            reindex_every: None,
            hard_set: HardSetMode::Fixed,
            probe_anchors: 64,
            hard_set_size: 3,
            report_margin: 0.5,
            lipschitz_probes: 16,
            d_embed: 32,
            d_attn: 16,
            policy_hidden: 32,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

fn positive(v: f64, name: &str) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleParams {
        self.schedule.unwrap_or_else(|| ScheduleParams::default_for(self.epochs))
    }

    /// Margin used for κ: the triplet margin when training with it.
    pub fn margin(&self) -> f64 {
        match self.loss {
            ContrastForm::Triplet { margin } => margin,
            ContrastForm::Infonce { .. } => self.report_margin,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        positive(self.lr, "lr")?;
        positive(self.epsilon, "epsilon")?;
        positive(self.tau_start, "tau_start")?;
        positive(self.tau_end, "tau_end")?;
        if self.k_max == 0 {
            return Err(Error::config("k_max must be at least 1"));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::config("beta must be nonnegative"));
        }
        if !(self.lambda_local >= 0.0) || !(self.lambda_policy >= 0.0) {
            return Err(Error::config("loss weights must be nonnegative"));
        }
        if !(self.q_frac > 0.0 && self.q_frac <= 1.0) {
            return Err(Error::config("q_frac must lie in (0, 1]"));
        }
        match self.loss {
            ContrastForm::Infonce { tau } => positive(tau, "contrastive tau")?,
            ContrastForm::Triplet { margin } => positive(margin, "triplet margin")?,
        }
        if let OptimizerConfig::Adamw {
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.optimizer
        {
            if !(weight_decay >= 0.0) || !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                return Err(Error::config("invalid AdamW coefficients"));
            }
            positive(eps, "AdamW eps")?;
        }
        if self.sampled_negatives == Some(0) {
            return Err(Error::config("sampled_negatives must be at least 1"));
        }
        if self.reindex_every == Some(0) || self.checkpoint_every == Some(0) {
            return Err(Error::config("reindex_every and checkpoint_every must be at least 1"));
        }
        if self.probe_anchors == 0 || self.hard_set_size == 0 || self.lipschitz_probes == 0 {
            return Err(Error::config("probe_anchors, hard_set_size and lipschitz_probes must be at least 1"));
        }
        if self.d_embed == 0 || self.d_attn == 0 || self.policy_hidden == 0 {
            return Err(Error::config("layer widths must be at least 1"));
        }
        self.schedule().validate()
    }

    /// A copy configured as arm `arm`.
    pub fn for_arm(&self, arm: Arm) -> Self {
        Self { arm, ..self.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "epoks": 4}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "arm": "cla"}"#).unwrap();
        assert_eq!(ok.epochs, 3);
        assert_eq!(ok.arm, Arm::Cla);
        assert_eq!(ok.batch_size, 64);
    }

    #[test]
    fn default_schedule_centres_at_forty_percent() {
        let c = TrainConfig::default();
        assert_eq!(c.schedule().eta0, 8.0);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { epsilon: -1.0, ..Default::default() },
            TrainConfig { q_frac: 1.5, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
