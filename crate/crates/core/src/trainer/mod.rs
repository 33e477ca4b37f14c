//! The training loop: warm-up, index build, per-batch sampling and loss
//! assembly, parameter updates and per-epoch bookkeeping.
//!
//! Random streams, all children of `TrainConfig::seed`:
//!
//! ```text
//! init/encoder, init/policy       parameter initialisation
//! warmup-shuffle[w], shuffle[η]   batch order per epoch
//! gumbel[step], fallback[step]    sampler noise, uniform in-batch partners
//! probes                          margin probe anchors
//! lipschitz                       similarity Lipschitz probes
//! ```
//!
//! Keeping one stream per purpose means a run that skips the sampler draws
//! exactly the same batches and initial weights as one that uses it.

pub mod config;
pub mod margin;
pub mod optim;
pub mod step;

use std::path::{Path, PathBuf};

use bacl_numerics::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use config::{Arm, ContrastForm, HardSetMode, LocalNegative, OptimizerConfig, TrainConfig};
pub use optim::Optimizer;
pub use step::{batch_objective, BatchObjective, BatchPlan, BatchSettings, BatchStats};

use crate::bns::{self, PolicyParams};
use crate::encoder::{EncoderDims, EncoderParams, Modality};
use crate::error::{Error, Result};
use crate::eval::metrics::{self, RetrievalMetrics};
use crate::index::{self, PoolEntry};
use crate::io::{self, Checkpoint};
use crate::seed;
use crate::synthdata::Corpus;

/// Perturbation size used for the Lipschitz estimate behind κ.
pub const LIPSCHITZ_SCALE: f64 = 1e-3;

/// Encoder plus sampler policy: the nine trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub policy: PolicyParams,
}

impl Model {
    pub fn init(dims: EncoderDims, policy_hidden: usize, root: u64) -> Self {
        let encoder = EncoderParams::init(dims, &mut seed::stream(root, "init/encoder"));
        let policy = PolicyParams::init(dims.d_embed, policy_hidden, &mut seed::stream(root, "init/policy"));
        Self { encoder, policy }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.encoder.tensors().into();
        v.extend(self.policy.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.encoder.tensors_mut().into();
        v.extend(self.policy.tensors_mut());
        v
    }

    pub fn shapes(&self) -> Vec<&[usize]> {
        self.tensors().into_iter().map(|t| t.shape()).collect()
    }
}

/// Loss and sampler summary for one epoch, averaged over its batches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub tau: f64,
    pub steps: usize,
    pub objective: f64,
    pub l_contrast: f64,
    pub l_local: f64,
    pub lambda_local: f64,
    pub l_main: f64,
    /// Mean reward objective `J` over batches that ran the sampler.
    pub reward: Option<f64>,
    pub anchors_with_pool: usize,
    pub fallbacks: usize,
    pub mean_pool_size: Option<f64>,
    /// Mean difficulty of the sampler's chosen negative.
    pub mean_difficulty: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub mean_delta: Option<f64>,
    pub mean_ael: Option<f64>,
    pub heldout: Option<RetrievalMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginRecord {
    pub epoch: usize,
    pub delta_eta: f64,
    pub bar_alpha: f64,
    pub kappa_report: f64,
    pub lipschitz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MarginTrace {
    pub probes: Vec<usize>,
    pub hard_sets: Vec<Vec<usize>>,
    /// Δ right after warm-up.
    pub initial_delta: f64,
    pub records: Vec<MarginRecord>,
}

impl MarginTrace {
    pub fn deltas(&self) -> Vec<(usize, f64)> {
        self.records.iter().map(|r| (r.epoch, r.delta_eta)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub warmup_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub margin: MarginTrace,
    pub final_metrics: Option<RetrievalMetrics>,
    pub checkpoints: Vec<String>,
    pub total_steps: u64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Optimizer,
    pub report: TrainReport,
}

/// Everything besides the config that a run may take.
#[derive(Clone, Default)]
pub struct TrainOptions<'a> {
    /// Corpus for held-out retrieval metrics.
    pub heldout: Option<&'a Corpus>,
    /// Evaluate on `heldout` after every epoch rather than only at the end.
    pub eval_every_epoch: bool,
    pub checkpoint_dir: Option<PathBuf>,
    /// Starting parameters in place of the seeded initialisation.
    pub init: Option<Model>,
    /// Optimizer state to resume from; requires `init`.
    pub init_optimizer: Option<Optimizer>,
}

fn settings_for(config: &TrainConfig, alpha: f64, tau: f64, arm: Arm) -> BatchSettings {
    BatchSettings {
        alpha,
        tau,
        beta: config.beta,
        q_frac: config.q_frac,
        lambda_local: config.lambda_local,
        lambda_policy: config.lambda_policy,
        loss: config.loss,
        sampled_negatives: config.sampled_negatives,
        local_negative: config.local_negative,
        use_sampler: arm.uses_sampler(),
        use_local: arm.uses_local(),
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    // A lone trailing row has no in-batch negative; it joins the batch before.
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

fn fallback_partners(b: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..b)
        .map(|i| {
            let j = rng.random_range(0..b - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

fn diverged(epoch: usize, e: Error) -> Error {
    if e.is_numerical_abort() {
        Error::Diverged {
            epoch,
            detail: e.to_string(),
        }
    } else {
        e
    }
}

#[derive(Default)]
struct EpochAccumulator {
    steps: usize,
    objective: f64,
    l_contrast: f64,
    l_local: f64,
    l_main: f64,
    reward_sum: f64,
    reward_steps: usize,
    stats: BatchStats,
}

impl EpochAccumulator {
    fn add(&mut self, obj: f64, out: &BatchObjective) {
        self.steps += 1;
        self.objective += obj;
        self.l_contrast += out.breakdown.l_contrast;
        self.l_local += out.breakdown.l_local;
        self.l_main += out.breakdown.l_main;
        let s = &out.stats;
        if let Some(r) = s.reward {
            self.reward_sum += r;
            self.reward_steps += 1;
        }
        let t = &mut self.stats;
        t.rows += s.rows;
        t.anchors_with_pool += s.anchors_with_pool;
        t.fallbacks += s.fallbacks;
        t.pool_size_sum += s.pool_size_sum;
        t.chosen_difficulty_sum += s.chosen_difficulty_sum;
        t.entropy_sum += s.entropy_sum;
        t.delta_mean_sum += s.delta_mean_sum;
        t.delta_count += s.delta_count;
        t.ael_sum += s.ael_sum;
        t.ael_count += s.ael_count;
    }

    fn record(&self, epoch: usize, alpha: f64, tau: f64, lambda_local: f64) -> EpochRecord {
        let n = self.steps.max(1) as f64;
        let t = &self.stats;
        let per = |sum: f64, count: usize| (count > 0).then(|| sum / count as f64);
        EpochRecord {
            epoch,
            alpha,
            tau,
            steps: self.steps,
            objective: self.objective / n,
            l_contrast: self.l_contrast / n,
            l_local: self.l_local / n,
            lambda_local,
            l_main: self.l_main / n,
            reward: per(self.reward_sum, self.reward_steps),
            anchors_with_pool: t.anchors_with_pool,
            fallbacks: t.fallbacks,
            mean_pool_size: per(t.pool_size_sum as f64, t.anchors_with_pool),
            mean_difficulty: per(t.chosen_difficulty_sum, t.anchors_with_pool),
            mean_entropy: per(t.entropy_sum, t.anchors_with_pool),
            mean_delta: per(t.delta_mean_sum, t.delta_count),
            mean_ael: per(t.ael_sum, t.ael_count),
            heldout: None,
        }
    }
}

/// Parameters, optimizer and step counter shared by warm-up and the main
/// loop.
struct Trainer<'a> {
    config: &'a TrainConfig,
    corpus: &'a Corpus,
    dims: EncoderDims,
    model: Model,
    optimizer: Optimizer,
    step: u64,
}

impl<'a> Trainer<'a> {
    fn new(config: &'a TrainConfig, corpus: &'a Corpus, init: Option<Model>, resume: Option<Optimizer>) -> Result<Self> {
        config.validate()?;
        if corpus.len() < 2 {
            return Err(Error::config(format!("training needs at least 2 pairs, corpus has {}", corpus.len())));
        }
        let dims = corpus.encoder_dims(config.d_embed, config.d_attn);
        let model = match init {
            Some(m) => {
                if m.encoder.dims != dims || m.policy.input_dim() != 3 * dims.d_embed {
                    return Err(Error::config("initial model does not match the corpus and config dimensions"));
                }
                m
            }
            None => Model::init(dims, config.policy_hidden, config.seed),
        };
        let fresh = Optimizer::new(config.optimizer, config.lr, &model.shapes());
        let optimizer = match resume {
            Some(o) => {
                let same_state = |a: &[Tensor], b: &[Tensor]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape());
                if o.config != config.optimizer || !same_state(&o.first, &fresh.first) || !same_state(&o.second, &fresh.second) {
                    return Err(Error::config("optimizer state does not match the config and model"));
                }
                Optimizer { lr: config.lr, ..o }
            }
            None => fresh,
        };
        Ok(Self {
            config,
            corpus,
            dims,
            model,
            optimizer,
            step: 0,
        })
    }

    /// One optimisation step; returns the objective value and batch summary.
    fn step(&mut self, plan: &BatchPlan, settings: &BatchSettings, epoch: usize) -> Result<(f64, BatchObjective)> {
        let mut tape = Tape::new();
        let enc = self.model.encoder.register(&mut tape);
        let pol = self.model.policy.register(&mut tape);
        let out = batch_objective(&mut tape, &enc, &pol, &self.dims, self.corpus, plan, settings).map_err(|e| diverged(epoch, e))?;
        let value = tape.scalar_value(out.objective)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("objective became {value} at step {}", self.step + 1),
            });
        }
        let grads = tape.backward(out.objective).map_err(|e| diverged(epoch, e.into()))?;
        let g: Vec<Tensor> = enc.all().into_iter().chain(pol.all()).map(|v| grads.wrt(v)).collect();
        if g.iter().any(|t| t.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Diverged {
                epoch,
                detail: format!("non-finite gradient at step {}", self.step + 1),
            });
        }
        self.optimizer.apply(&mut self.model.tensors_mut(), &g)?;
        self.step += 1;
        Ok((value, out))
    }

    fn plan(&self, ids: Vec<usize>, pools: Option<&[Vec<PoolEntry>]>, draw_fallback: bool) -> BatchPlan {
        let b = ids.len();
        let pools: Vec<Vec<PoolEntry>> = match pools {
            Some(p) => ids.iter().map(|&id| p[id].clone()).collect(),
            None => vec![Vec::new(); b],
        };
        let mut g = seed::indexed_stream(self.config.seed, "gumbel", self.step);
        let noise = pools
            .iter()
            .map(|p| {
                if self.config.noise_free {
                    vec![0.0; p.len()]
                } else {
                    bns::gumbel_noise(p.len(), &mut g)
                }
            })
            .collect();
        let fallback = if draw_fallback {
            fallback_partners(b, &mut seed::indexed_stream(self.config.seed, "fallback", self.step))
        } else {
            (0..b).map(|i| (i + 1) % b).collect()
        };
        BatchPlan { ids, pools, noise, fallback }
    }

    fn warmup(&mut self) -> Result<Vec<f64>> {
        let settings = settings_for(self.config, 0.0, self.config.tau_start, Arm::Baseline);
        let mut losses = Vec::with_capacity(self.config.warmup_epochs);
        for w in 1..=self.config.warmup_epochs {
            let mut rng = seed::indexed_stream(self.config.seed, "warmup-shuffle", w as u64);
            let mut acc = EpochAccumulator::default();
            for ids in batches(self.corpus.len(), self.config.batch_size, &mut rng) {
                let plan = self.plan(ids, None, false);
                let (v, out) = self.step(&plan, &settings, 0)?;
                acc.add(v, &out);
            }
            losses.push(acc.objective / acc.steps.max(1) as f64);
        }
        Ok(losses)
    }

    fn pools(&self, epoch: usize) -> Result<Vec<Vec<PoolEntry>>> {
        let xi = index::build(self.corpus, &self.model.encoder, Modality::X, epoch)?;
        let yi = index::build(self.corpus, &self.model.encoder, Modality::Y, epoch)?;
        (0..self.corpus.len())
            .into_par_iter()
            .map(|id| index::candidate_pool(&xi, &yi, id, self.config.epsilon, self.config.k_max))
            .collect()
    }

    fn margin_record(&self, epoch: usize, probes: &[usize], hard: &[Vec<usize>]) -> Result<MarginRecord> {
        let c = self.config;
        let enc = &self.model.encoder;
        let reselected;
        let hard = match c.hard_set {
            HardSetMode::Fixed => hard,
            HardSetMode::Reselect => {
                reselected = margin::select_hard_sets(enc, self.corpus, probes, c.hard_set_size)?;
                &reselected
            }
        };
        let delta_eta = margin::margin_delta(enc, self.corpus, probes, hard)?;
        let lipschitz = crate::encoder::lipschitz_probe(enc, c.lipschitz_probes, LIPSCHITZ_SCALE, seed::derive(c.seed, "lipschitz"))?;
        Ok(MarginRecord {
            epoch,
            delta_eta,
            bar_alpha: margin::bar_alpha(&c.schedule(), epoch, c.batch_size),
            kappa_report: margin::kappa(c.lr, c.beta, c.margin(), c.epsilon, lipschitz),
            lipschitz,
        })
    }

    fn checkpoint(&self, dir: &Path, epoch: usize) -> Result<String> {
        let path = dir.join(format!("ckpt_{epoch}.bin"));
        io::write_checkpoint(
            &path,
            &Checkpoint {
                epoch,
                model: self.model.clone(),
                optimizer: self.optimizer.clone(),
            },
        )?;
        Ok(path.display().to_string())
    }
}

/// Warm-up only: `warmup_epochs` of in-batch contrastive training from the
/// seeded initialisation. Returns the parameters and per-epoch mean losses.
pub fn warmup(config: &TrainConfig, corpus: &Corpus) -> Result<(Model, Vec<f64>)> {
    let mut t = Trainer::new(config, corpus, None, None)?;
    let losses = t.warmup()?;
    Ok((t.model, losses))
}

/// Full run: warm-up, index build, then `epochs` epochs of the configured
/// arm.
pub fn train(config: &TrainConfig, corpus: &Corpus, options: TrainOptions<'_>) -> Result<TrainOutcome> {
    if options.init_optimizer.is_some() && options.init.is_none() {
        return Err(Error::config("an optimizer state needs the model it belongs to"));
    }
    let mut t = Trainer::new(config, corpus, options.init.clone(), options.init_optimizer.clone())?;
    let warmup_losses = t.warmup()?;

    let arm = config.arm;
    let wants_pools = arm.uses_sampler() && !config.force_uniform_fallback;
    let mut pools = if wants_pools { Some(t.pools(0)?) } else { None };

    let probes = margin::select_probes(corpus.len(), config.probe_anchors, config.seed);
    let hard_sets = margin::select_hard_sets(&t.model.encoder, corpus, &probes, config.hard_set_size)?;
    let initial_delta = margin::margin_delta(&t.model.encoder, corpus, &probes, &hard_sets)?;

    let schedule = config.schedule();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut records = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    for eta in 1..=config.epochs {
        let alpha = bns::alpha(&schedule, eta as f64);
        let tau = bns::tau_at(config.tau_start, config.tau_end, eta - 1, config.epochs);
        let settings = settings_for(config, alpha, tau, arm);
        let mut rng = seed::indexed_stream(config.seed, "shuffle", eta as u64);
        let mut acc = EpochAccumulator::default();
        for ids in batches(corpus.len(), config.batch_size, &mut rng) {
            let plan = t.plan(ids, pools.as_deref(), arm.uses_local());
            let (v, out) = t.step(&plan, &settings, eta)?;
            acc.add(v, &out);
        }
        let mut record = acc.record(eta, alpha, tau, config.lambda_local);
        if let (Some(h), true) = (options.heldout, options.eval_every_epoch) {
            record.heldout = Some(metrics::evaluate(h, &t.model.encoder)?);
        }
        epochs.push(record);
        records.push(t.margin_record(eta, &probes, &hard_sets)?);

        if let (Some(r), true) = (config.reindex_every, wants_pools) {
            if eta % r == 0 && eta < config.epochs {
                pools = Some(t.pools(eta)?);
            }
        }
        if let Some(dir) = &options.checkpoint_dir {
            let due = config.checkpoint_every.is_some_and(|k| eta % k == 0);
            if due || eta == config.epochs {
                checkpoints.push(t.checkpoint(dir, eta)?);
            }
        }
    }

    let final_metrics = match options.heldout {
        Some(h) => match epochs.last().and_then(|r| r.heldout) {
            Some(m) => Some(m),
            None => Some(metrics::evaluate(h, &t.model.encoder)?),
        },
        None => None,
    };
    let report = TrainReport {
        config: config.clone(),
        warmup_losses,
        epochs,
        margin: MarginTrace {
            probes,
            hard_sets,
            initial_delta,
            records,
        },
        final_metrics,
        checkpoints,
        total_steps: t.step,
    };
    Ok(TrainOutcome {
        model: t.model,
        optimizer: t.optimizer,
        report,
    })
}

/// Continues training `model` for `epochs` epochs of the configured arm
/// with fixed candidate pools (indexed by sample id), a constant `alpha`
/// and the sampler temperature at its annealed end value. No warm-up.
/// Without `optimizer` the optimizer starts from a fresh state.
pub fn finetune(
    config: &TrainConfig,
    corpus: &Corpus,
    model: Model,
    optimizer: Option<Optimizer>,
    pools: &[Vec<PoolEntry>],
    epochs: usize,
    alpha: f64,
) -> Result<Model> {
    if pools.len() != corpus.len() {
        return Err(Error::LengthMismatch {
            op: "finetune pools",
            left: pools.len(),
            right: corpus.len(),
        });
    }
    let mut t = Trainer::new(config, corpus, Some(model), optimizer)?;
    let settings = settings_for(config, alpha, config.tau_end, config.arm);
    for e in 1..=epochs {
        let mut rng = seed::indexed_stream(config.seed, "finetune-shuffle", e as u64);
        for ids in batches(corpus.len(), config.batch_size, &mut rng) {
            let plan = t.plan(ids, config.arm.uses_sampler().then_some(pools), config.arm.uses_local());
            t.step(&plan, &settings, e)?;
        }
    }
    Ok(t.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate, CorpusSpec};

    fn tiny() -> (TrainConfig, Corpus) {
        let corpus = generate(&CorpusSpec {
            n_pairs: 24,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            warmup_epochs: 1,
            probe_anchors: 8,
            lipschitz_probes: 2,
            d_embed: 8,
            d_attn: 4,
            policy_hidden: 8,
            epsilon: 0.5,
            ..Default::default()
        };
        (config, corpus)
    }

    #[test]
    fn batches_cover_every_id_once() {
        let b = batches(10, 4, &mut seed::stream(1, "t"));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let b = batches(9, 4, &mut seed::stream(1, "t"));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn fallback_never_picks_self() {
        let mut rng = seed::stream(2, "t");
        for b in 2..6 {
            let f = fallback_partners(b, &mut rng);
            assert!(f.iter().enumerate().all(|(i, &j)| i != j && j < b));
        }
    }

    #[test]
    fn tiny_run_records_every_epoch() {
        let (config, corpus) = tiny();
        let out = train(&config, &corpus, TrainOptions::default()).unwrap();
        assert_eq!(out.report.epochs.len(), 2);
        assert_eq!(out.report.margin.records.len(), 2);
        assert_eq!(out.report.warmup_losses.len(), 1);
        assert_eq!(out.report.total_steps, 9);
        assert!(out.report.epochs.iter().all(|r| r.l_main.is_finite()));
    }

    #[test]
    fn zero_warmup_passes_init_through() {
        let (config, corpus) = tiny();
        let config = TrainConfig { warmup_epochs: 0, ..config };
        let (model, losses) = warmup(&config, &corpus).unwrap();
        assert!(losses.is_empty());
        let dims = corpus.encoder_dims(config.d_embed, config.d_attn);
        assert_eq!(model, Model::init(dims, config.policy_hidden, config.seed));
    }
}
