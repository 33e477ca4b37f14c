use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use bacl_core::encoder::Modality;
use bacl_core::eval::{self, RetrievalMetrics};
use bacl_core::index;
use bacl_core::io::{self, Checkpoint};
use bacl_core::synthdata::{generate_split, Corpus, CorpusSpec, Split};
use bacl_core::trainer::{self, EpochRecord, MarginRecord, TrainConfig, TrainOptions};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::output::{config_hash, file_digest, num, opt, Artifacts, RunManifest, Table};
use crate::{experiment, Cli, Command, ModalityArg, SplitArg};

/// Bad invocation detected by the driver itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid JSON in {}", path.display()))
}

fn read_or_default<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

pub fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot configure the thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Gen { spec, out, split } => gen(cli, argv, spec, out.as_deref(), *split),
        Command::Train {
            config,
            corpus,
            spec,
            heldout,
            arm,
            init_from,
            reindex_every,
        } => {
            let mut cfg: TrainConfig = read_or_default(config.as_ref())?;
            if let Some(a) = arm {
                cfg.arm = (*a).into();
            }
            if let Some(r) = reindex_every {
                cfg.reindex_every = Some(*r);
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let inputs = TrainInputs {
                corpus: corpus.as_deref(),
                spec: spec.as_deref(),
                heldout: heldout.as_deref(),
                init_from: init_from.as_deref(),
            };
            train(cli, argv, cfg, inputs)
        }
        Command::Eval { checkpoint, corpus, spec } => evaluate(cli, argv, checkpoint, corpus.as_deref(), spec.as_deref()),
        Command::Experiment { name, config } => {
            let mut cfg: bacl_core::experiments::ExperimentConfig = read_or_default(config.as_ref())?;
            if let Some(s) = cli.seed {
                cfg.corpus.seed = s;
                let n = cfg.seeds.len() as u64;
                cfg.seeds = (s..s + n).collect();
            }
            cfg.validate()?;
            experiment::run(cli, argv, *name, cfg)
        }
        Command::DumpIndex {
            checkpoint,
            corpus,
            modality,
        } => dump_index(cli, argv, checkpoint, corpus, *modality),
    }
}

fn gen(cli: &Cli, argv: &[String], spec_path: &Path, out: Option<&Path>, split: SplitArg) -> Result<()> {
    let mut spec: CorpusSpec = read_json(spec_path)?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| cli.out_dir.join("corpus.bin"));
    if cli.dry_run {
        return print_json(&spec);
    }
    let start = Instant::now();
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Heldout => Split::Heldout,
    };
    let corpus = generate_split(&spec, split)?;
    io::write_corpus(&out, &corpus)?;
    let mut sidecar = out.as_os_str().to_owned();
    sidecar.push(".json");
    let hash = config_hash(&spec)?;
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    RunManifest::new("gen", argv, &hash, spec.seed, &[out.clone(), PathBuf::from(sidecar)], start.elapsed()).write(&dir)?;
    println!("wrote {} pairs to {}", corpus.len(), out.display());
    Ok(())
}

struct TrainInputs<'a> {
    corpus: Option<&'a Path>,
    spec: Option<&'a Path>,
    heldout: Option<&'a Path>,
    init_from: Option<&'a Path>,
}

/// The training corpus and its held-out partner.
fn corpora(corpus: Option<&Path>, spec: Option<&Path>, heldout: Option<&Path>) -> Result<(Corpus, Corpus)> {
    let train = match (corpus, spec) {
        (Some(_), Some(_)) => return Err(usage("give either --corpus or --spec, not both")),
        (Some(p), None) => io::read_corpus(p)?,
        (None, s) => {
            let spec: CorpusSpec = read_or_default(s.map(Path::to_path_buf).as_ref())?;
            generate_split(&spec, Split::Train)?
        }
    };
    let heldout = match heldout {
        Some(p) => io::read_corpus(p)?,
        None => generate_split(&train.spec, Split::Heldout)?,
    };
    Ok((train, heldout))
}

#[derive(Serialize)]
struct TrainIdentity<'a> {
    config: &'a TrainConfig,
    corpus: &'a CorpusSpec,
    init_from: Option<String>,
}

fn train(cli: &Cli, argv: &[String], cfg: TrainConfig, inputs: TrainInputs<'_>) -> Result<()> {
    cfg.validate()?;
    if cli.dry_run {
        if let Some(p) = inputs.corpus {
            if !p.exists() {
                return Err(usage(format!("corpus file {} does not exist", p.display())));
            }
        }
        return print_json(&cfg);
    }
    let start = Instant::now();
    let (train_corpus, heldout) = corpora(inputs.corpus, inputs.spec, inputs.heldout)?;
    let init = match inputs.init_from {
        Some(p) => Some(io::read_checkpoint(p)?),
        None => None,
    };
    let identity = TrainIdentity {
        config: &cfg,
        corpus: &train_corpus.spec,
        init_from: inputs.init_from.map(file_digest).transpose()?,
    };
    let hash = config_hash(&identity)?;
    let dir = cli.out_dir.clone();
    let options = TrainOptions {
        heldout: Some(&heldout),
        eval_every_epoch: false,
        checkpoint_dir: Some(dir.clone()),
        init: init.as_ref().map(|c| c.model.clone()),
        init_optimizer: init.map(|c| c.optimizer),
    };
    let outcome = trainer::train(&cfg, &train_corpus, options)?;
    let report = &outcome.report;
    let mut art = Artifacts::new(&dir, hash.clone());
    write_train_tables(&mut art, &report.epochs, report.margin.initial_delta, &report.margin.records)?;
    let metrics = report.final_metrics.expect("held-out corpus was given");
    art.csv("metrics.csv", &metrics_table("heldout", &metrics))?;
    art.json("report.json", report)?;
    for c in &report.checkpoints {
        art.note(PathBuf::from(c));
    }
    RunManifest::new("train", argv, &hash, cfg.seed, &art.written, start.elapsed()).write(&dir)?;
    println!(
        "{} arm: held-out R@1 {:.4}, R@10 {:.4}, MRR {:.4} ({} steps)",
        cfg.arm.name(),
        metrics.r1,
        metrics.r10,
        metrics.mrr,
        report.total_steps
    );
    Ok(())
}

/// `losses.csv`, `sampler.csv` and `margin.csv`; the margin table opens with
/// the pre-training value at epoch 0.
pub fn write_train_tables(art: &mut Artifacts, epochs: &[EpochRecord], initial_delta: f64, margins: &[MarginRecord]) -> Result<()> {
    let mut losses = Table::new(&["epoch", "l_contrast", "l_local", "lambda_local", "l_main", "objective", "mean_delta", "mean_ael"]);
    let mut sampler = Table::new(&[
        "epoch",
        "alpha",
        "tau",
        "anchors_with_pool",
        "fallbacks",
        "mean_pool_size",
        "mean_difficulty",
        "mean_entropy",
        "reward",
    ]);
    for e in epochs {
        losses.push(vec![
            e.epoch.to_string(),
            num(e.l_contrast),
            num(e.l_local),
            num(e.lambda_local),
            num(e.l_main),
            num(e.objective),
            opt(e.mean_delta),
            opt(e.mean_ael),
        ]);
        sampler.push(vec![
            e.epoch.to_string(),
            num(e.alpha),
            num(e.tau),
            e.anchors_with_pool.to_string(),
            e.fallbacks.to_string(),
            opt(e.mean_pool_size),
            opt(e.mean_difficulty),
            opt(e.mean_entropy),
            opt(e.reward),
        ]);
    }
    let mut margin = Table::new(&["epoch", "delta_eta", "bar_alpha", "kappa_report", "lipschitz"]);
    margin.push(vec!["0".into(), num(initial_delta), String::new(), String::new(), String::new()]);
    for m in margins {
        margin.push(vec![m.epoch.to_string(), num(m.delta_eta), num(m.bar_alpha), num(m.kappa_report), num(m.lipschitz)]);
    }
    art.csv("losses.csv", &losses)?;
    art.csv("sampler.csv", &sampler)?;
    art.csv("margin.csv", &margin)?;
    Ok(())
}

pub fn metrics_table(split: &str, m: &RetrievalMetrics) -> Table {
    let mut t = Table::new(&["split", "r1", "r5", "r10", "map", "mrr", "ndcg10"]);
    t.push(vec![split.to_string(), num(m.r1), num(m.r5), num(m.r10), num(m.map), num(m.mrr), num(m.ndcg10)]);
    t
}

fn load_checkpoint_for(path: &Path, corpus: &Corpus) -> Result<Checkpoint> {
    let ckpt = io::read_checkpoint(path)?;
    let d = ckpt.model.encoder.dims;
    if d.d_latent != corpus.spec.d_latent || d.m_tokens != corpus.spec.m_tokens || d.l_tokens != corpus.spec.l_tokens {
        return Err(usage(format!("checkpoint {} does not match the corpus dimensions", path.display())));
    }
    Ok(ckpt)
}

fn evaluate(cli: &Cli, argv: &[String], checkpoint: &Path, corpus: Option<&Path>, spec: Option<&Path>) -> Result<()> {
    let corpus = match (corpus, spec) {
        (Some(_), Some(_)) => return Err(usage("give either --corpus or --spec, not both")),
        (Some(p), None) => io::read_corpus(p)?,
        (None, s) => {
            let mut spec: CorpusSpec = read_or_default(s.map(Path::to_path_buf).as_ref())?;
            if let Some(seed) = cli.seed {
                spec.seed = seed;
            }
            generate_split(&spec, Split::Heldout)?
        }
    };
    let ckpt = load_checkpoint_for(checkpoint, &corpus)?;
    if cli.dry_run {
        return print_json(&corpus.spec);
    }
    let start = Instant::now();
    let metrics = eval::evaluate(&corpus, &ckpt.model.encoder)?;
    let hash = config_hash(&(&corpus.spec, file_digest(checkpoint)?))?;
    let mut art = Artifacts::new(&cli.out_dir, hash.clone());
    let split = match corpus.split {
        Split::Train => "train",
        Split::Heldout => "heldout",
    };
    art.csv("metrics.csv", &metrics_table(split, &metrics))?;
    RunManifest::new("eval", argv, &hash, corpus.spec.seed, &art.written, start.elapsed()).write(&cli.out_dir)?;
    println!("R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  mAP {:.4}  nDCG@10 {:.4}", metrics.r1, metrics.r5, metrics.r10, metrics.map, metrics.ndcg10);
    Ok(())
}

fn dump_index(cli: &Cli, argv: &[String], checkpoint: &Path, corpus: &Path, modality: ModalityArg) -> Result<()> {
    let corpus = io::read_corpus(corpus)?;
    let ckpt = load_checkpoint_for(checkpoint, &corpus)?;
    if cli.dry_run {
        return print_json(&corpus.spec);
    }
    let start = Instant::now();
    let hash = config_hash(&(&corpus.spec, file_digest(checkpoint)?))?;
    let mut art = Artifacts::new(&cli.out_dir, hash.clone());
    let modalities: &[Modality] = match modality {
        ModalityArg::X => &[Modality::X],
        ModalityArg::Y => &[Modality::Y],
        ModalityArg::Both => &[Modality::X, Modality::Y],
    };
    for &m in modalities {
        let idx = index::build(&corpus, &ckpt.model.encoder, m, ckpt.epoch)?;
        let d = idx.vectors.cols();
        let mut header = vec!["id".to_string(), "built_at_epoch".to_string()];
        header.extend((0..d).map(|k| format!("v{k}")));
        let mut t = Table::with_header(header);
        for (row, &id) in idx.ids.iter().enumerate() {
            let mut r = vec![id.to_string(), idx.built_at_epoch.to_string()];
            r.extend(idx.vector(row).iter().map(|&v| num(v)));
            t.push(r);
        }
        art.csv(&format!("index_{}.csv", m.as_str()), &t)?;
    }
    RunManifest::new("dump-index", argv, &hash, corpus.spec.seed, &art.written, start.elapsed()).write(&cli.out_dir)?;
    println!("wrote {} index file(s) to {}", modalities.len(), cli.out_dir.display());
    Ok(())
}
