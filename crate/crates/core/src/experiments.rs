//! Experiment protocols shared by the command-line driver and the
//! acceptance suite. Each returns tidy rows; writing them is the caller's
//! business.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bns::{ScheduleParams, SchedulePreset};
use crate::error::{Error, Result};
use crate::eval::studies::{self, mean_std, AelPoint, MiningConfig, MiningPoint, ScalingConfig, ScalingRow, ScalingRun};
use crate::eval::{contraction_fit, ContractionFit, RetrievalMetrics};
use crate::synthdata::{generate, generate_split, Corpus, CorpusSpec, Split};
use crate::trainer::{self, Arm, ContrastForm, EpochRecord, MarginRecord, OptimizerConfig, TrainConfig, TrainOptions};

pub const EXPERIMENTS: [&str; 6] = ["ablation", "schedule-sweep", "mining", "contraction", "scaling", "ael"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionConfig {
    pub triplet_margin: f64,
    /// Constant SGD step size.
    pub lr: f64,
}

impl Default for ContractionConfig {
    fn default() -> Self {
        Self {
            triplet_margin: 0.5,
            lr: 1e-2,
        }
    }
}

/// Everything an experiment needs; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSpec,
    /// Template for every run; `arm` and `seed` are overridden per run.
    pub train: TrainConfig,
    /// Training seeds; the corpus stays fixed.
    pub seeds: Vec<u64>,
    /// Held-out pairs; `None` uses the training size.
    pub heldout_pairs: Option<usize>,
    pub ablation_arms: Vec<Arm>,
    pub schedules: Vec<SchedulePreset>,
    pub mining: MiningConfig,
    pub contraction: ContractionConfig,
    pub scaling: ScalingConfig,
    pub ael_top_frac: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            train: TrainConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            heldout_pairs: None,
            ablation_arms: Arm::ALL.to_vec(),
            schedules: SchedulePreset::ALL.to_vec(),
            mining: MiningConfig::default(),
            contraction: ContractionConfig::default(),
            scaling: ScalingConfig::default(),
            ael_top_frac: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Empty("seed list"));
        }
        if !(self.ael_top_frac > 0.0 && self.ael_top_frac <= 1.0) {
            return Err(Error::config("ael_top_frac must lie in (0, 1]"));
        }
        if !(self.contraction.triplet_margin > 0.0) || !(self.contraction.lr > 0.0) {
            return Err(Error::config("contraction margin and lr must be positive"));
        }
        Ok(())
    }

    pub fn corpora(&self) -> Result<(Corpus, Corpus)> {
        let train = generate(&self.corpus)?;
        let n = self.heldout_pairs.unwrap_or(self.corpus.n_pairs);
        let heldout = generate_split(&self.corpus.with_n_pairs(n), Split::Heldout)?;
        Ok((train, heldout))
    }

    /// The template's schedule with its centre but a preset's triple.
    pub fn schedule_for(&self, preset: SchedulePreset) -> ScheduleParams {
        preset.with_eta0(self.train.schedule().eta0)
    }
}

/// One finished training run of an arm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmRun {
    pub label: String,
    pub arm: Arm,
    pub seed: u64,
    pub heldout: RetrievalMetrics,
    pub ael: Option<AelPoint>,
    pub epochs: Vec<EpochRecord>,
    pub initial_delta: f64,
    pub margin: Vec<MarginRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmSummary {
    pub label: String,
    pub arm: Arm,
    pub seeds: usize,
    pub mean_r1: f64,
    pub std_r1: f64,
    pub mean_r10: f64,
    pub mean_mrr: f64,
    pub mean_ael: Option<f64>,
    pub std_ael: Option<f64>,
}

pub fn summarise(runs: &[ArmRun]) -> Vec<ArmSummary> {
    let mut labels: Vec<(&str, Arm)> = Vec::new();
    for r in runs {
        if !labels.iter().any(|(l, _)| *l == r.label) {
            labels.push((&r.label, r.arm));
        }
    }
    labels
        .into_iter()
        .map(|(label, arm)| {
            let rs: Vec<&ArmRun> = runs.iter().filter(|r| r.label == label).collect();
            let r1: Vec<f64> = rs.iter().map(|r| r.heldout.r1).collect();
            let (mean_r1, std_r1) = mean_std(&r1);
            let mean_r10 = mean_std(&rs.iter().map(|r| r.heldout.r10).collect::<Vec<_>>()).0;
            let mean_mrr = mean_std(&rs.iter().map(|r| r.heldout.mrr).collect::<Vec<_>>()).0;
            let ael: Vec<f64> = rs.iter().filter_map(|r| r.ael.map(|a| a.coverage)).collect();
            let (mean_ael, std_ael) = if ael.len() == rs.len() {
                let (m, s) = mean_std(&ael);
                (Some(m), Some(s))
            } else {
                (None, None)
            };
            ArmSummary {
                label: label.to_string(),
                arm,
                seeds: rs.len(),
                mean_r1,
                std_r1,
                mean_r10,
                mean_mrr,
                mean_ael,
                std_ael,
            }
        })
        .collect()
}

/// A labelled run request.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub label: String,
    pub config: TrainConfig,
}

/// Trains every request on the shared corpora; results keep request order.
pub fn run_all(specs: &[RunSpec], train: &Corpus, heldout: &Corpus, ael_top_frac: Option<f64>) -> Result<Vec<ArmRun>> {
    specs
        .par_iter()
        .map(|s| {
            let out = trainer::train(
                &s.config,
                train,
                TrainOptions {
                    heldout: Some(heldout),
                    ..Default::default()
                },
            )?;
            let heldout_metrics = out.report.final_metrics.expect("held-out corpus was given");
            let ael = match ael_top_frac {
                Some(f) => Some(studies::ael_study(&out.model.encoder, heldout, f)?),
                None => None,
            };
            Ok(ArmRun {
                label: s.label.clone(),
                arm: s.config.arm,
                seed: s.config.seed,
                heldout: heldout_metrics,
                ael,
                epochs: out.report.epochs,
                initial_delta: out.report.margin.initial_delta,
                margin: out.report.margin.records,
            })
        })
        .collect()
}

pub fn ablation_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    cfg.ablation_arms
        .iter()
        .flat_map(|&arm| {
            cfg.seeds.iter().map(move |&seed| RunSpec {
                label: arm.name().to_string(),
                config: TrainConfig {
                    seed,
                    ..cfg.train.for_arm(arm)
                },
            })
        })
        .collect()
}

/// BACL runs under each schedule preset.
pub fn schedule_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    cfg.schedules
        .iter()
        .flat_map(|&preset| {
            cfg.seeds.iter().map(move |&seed| RunSpec {
                label: preset.name().to_string(),
                config: TrainConfig {
                    seed,
                    schedule: Some(cfg.schedule_for(preset)),
                    ..cfg.train.for_arm(Arm::Bacl)
                },
            })
        })
        .collect()
}

/// Baseline and BACL runs, each followed by the localisation study.
pub fn ael_specs(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    [Arm::Baseline, Arm::Bacl]
        .into_iter()
        .flat_map(|arm| {
            cfg.seeds.iter().map(move |&seed| RunSpec {
                label: arm.name().to_string(),
                config: TrainConfig {
                    seed,
                    ..cfg.train.for_arm(arm)
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiningOutcome {
    pub base: RetrievalMetrics,
    pub points: Vec<MiningPoint>,
}

/// Trains the template's arm with the first seed, then runs the mining
/// study on the training corpus, evaluating on the held-out one.
pub fn mining(cfg: &ExperimentConfig, train: &Corpus, heldout: &Corpus) -> Result<MiningOutcome> {
    let config = TrainConfig {
        seed: cfg.seeds[0],
        ..cfg.train.clone()
    };
    let out = trainer::train(
        &config,
        train,
        TrainOptions {
            heldout: Some(heldout),
            ..Default::default()
        },
    )?;
    let points = studies::mining_study(&out.model, Some(&out.optimizer), train, Some(heldout), &config, &cfg.mining)?;
    Ok(MiningOutcome {
        base: out.report.final_metrics.expect("held-out corpus was given"),
        points,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionRow {
    pub epoch: usize,
    pub delta_eta: f64,
    pub bar_alpha: f64,
    pub kappa_report: f64,
    /// `max(floor, 1 − R@10)` on the held-out corpus.
    pub alignment_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContractionOutcome {
    pub config: TrainConfig,
    pub eta0: f64,
    pub initial_delta: f64,
    pub rows: Vec<ContractionRow>,
    /// Fit of `log Δ_η` on `η²` over epochs after `η0`.
    pub margin_fit: Result<ContractionFit, String>,
    /// The same fit on the alignment-error proxy.
    pub error_fit: Result<ContractionFit, String>,
}

/// The triplet-margin, constant-lr SGD variant of the template.
pub fn contraction_config(cfg: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        seed: cfg.seeds[0],
        loss: ContrastForm::Triplet {
            margin: cfg.contraction.triplet_margin,
        },
        optimizer: OptimizerConfig::Sgd,
        lr: cfg.contraction.lr,
        schedule: Some(cfg.schedule_for(SchedulePreset::Default)),
        ..cfg.train.for_arm(Arm::Bacl)
    }
}

pub fn contraction(cfg: &ExperimentConfig, train: &Corpus, heldout: &Corpus) -> Result<ContractionOutcome> {
    let config = contraction_config(cfg);
    let out = trainer::train(
        &config,
        train,
        TrainOptions {
            heldout: Some(heldout),
            eval_every_epoch: true,
            ..Default::default()
        },
    )?;
    let rows: Vec<ContractionRow> = out
        .report
        .margin
        .records
        .iter()
        .zip(&out.report.epochs)
        .map(|(m, e)| ContractionRow {
            epoch: m.epoch,
            delta_eta: m.delta_eta,
            bar_alpha: m.bar_alpha,
            kappa_report: m.kappa_report,
            alignment_error: e.heldout.expect("evaluated every epoch").alignment_error(),
        })
        .collect();
    let eta0 = config.schedule().eta0;
    let margin: Vec<(usize, f64)> = rows.iter().map(|r| (r.epoch, r.delta_eta)).collect();
    let error: Vec<(usize, f64)> = rows.iter().map(|r| (r.epoch, r.alignment_error)).collect();
    Ok(ContractionOutcome {
        eta0,
        initial_delta: out.report.margin.initial_delta,
        margin_fit: contraction_fit(&margin, eta0).map_err(|e| e.to_string()),
        error_fit: contraction_fit(&error, eta0).map_err(|e| e.to_string()),
        config,
        rows,
    })
}

pub fn scaling(cfg: &ExperimentConfig) -> Result<(Vec<ScalingRow>, Vec<ScalingRun>)> {
    studies::rate_scaling(&cfg.train, &cfg.corpus, &cfg.scaling)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let c = ExperimentConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"seedz": [1]}"#).is_err());
        let partial: ExperimentConfig = serde_json::from_str(r#"{"seeds": [7]}"#).unwrap();
        assert_eq!(partial.seeds, vec![7]);
        assert!(partial.validate().is_ok());
    }

    #[test]
    fn spec_lists_cover_arms_and_presets() {
        let c = ExperimentConfig {
            seeds: vec![3, 4],
            ..Default::default()
        };
        let a = ablation_specs(&c);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|s| s.config.arm.name() == s.label));
        let s = schedule_specs(&c);
        assert_eq!(s.len(), 6);
        assert!(s.iter().all(|r| r.config.arm == Arm::Bacl));
        assert_eq!(s[0].config.schedule.unwrap(), SchedulePreset::Shallow.with_eta0(8.0));
    }

    #[test]
    fn summary_groups_by_label() {
        let m = |r1| RetrievalMetrics {
            r1,
            r5: 1.0,
            r10: 1.0,
            map: r1,
            mrr: r1,
            ndcg10: r1,
        };
        let run = |label: &str, r1| ArmRun {
            label: label.into(),
            arm: Arm::Bns,
            seed: 0,
            heldout: m(r1),
            ael: None,
            epochs: vec![],
            initial_delta: 0.0,
            margin: vec![],
        };
        let s = summarise(&[run("a", 0.5), run("b", 0.9), run("a", 0.7)]);
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].label, "a");
        assert!((s[0].mean_r1 - 0.6).abs() < 1e-15);
        assert_eq!(s[0].seeds, 2);
        assert_eq!(s[0].mean_ael, None);
    }
}
