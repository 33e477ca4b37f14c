//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints its verdict. Property criteria fail the process; empirical ones
//! report only.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use bacl_core::bns::{self, SchedulePreset};
use bacl_core::cla;
use bacl_core::encoder::{EncoderParams, Modality};
use bacl_core::eval::studies::mean_std;
use bacl_core::eval::{RankingResult, RetrievalMetrics};
use bacl_core::experiments::{self, ArmRun, ExperimentConfig};
use bacl_core::index::{self, ModalityIndex};
use bacl_core::synthdata::{generate, CorpusSpec};
use bacl_core::trainer::{margin, Arm, ContrastForm};
use bacl_numerics::Tensor;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Mean paired gap `a − b` over seeds and its seed standard deviation.
fn paired_gap(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    mean_std(&d)
}

fn r1_by_seed(runs: &[ArmRun], label: &str) -> Vec<f64> {
    runs.iter().filter(|r| r.label == label).map(|r| r.heldout.r1).collect()
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let infonce = ContrastForm::Infonce { tau: 0.1 };
    for (pools, seed, sampled) in [([true, true], 1, None), ([true, false], 2, Some(2))] {
        let s = gradient::setup(pools, seed);
        let r = gradient::check(&s, &gradient::settings(Arm::Bacl, infonce, sampled, 0.0), false);
        worst = worst.max(r.max_rel_error);
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(worst <= 1e-4 && secs < 10.0, format!("max relative error {worst:.2e}, {secs:.1} s"))
}

fn oracles() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut bad = BTreeMap::<&str, usize>::new();
    for _ in 0..100 {
        let n = rng.random_range(2..200);
        let d = rng.random_range(1..6);
        let rows = unit_rows(&mut rng, n, d);
        let idx = ModalityIndex {
            modality: Modality::Y,
            ids: (0..n).collect(),
            vectors: Tensor::from_rows(&rows).unwrap(),
            built_at_epoch: 0,
        };
        let anchor_id = rng.random_range(0..n);
        let anchor = unit_rows(&mut rng, 1, d).remove(0);
        let pos = dot_ref(&anchor, &rows[anchor_id]);
        let (eps, k) = (rng.random_range(0.01..1.5), rng.random_range(1..30));
        let got = index::retrieve_candidates(&idx, anchor_id, &anchor, pos, eps, k).unwrap();
        let want = retrieve_ref(&idx.ids, &rows, anchor_id, &anchor, pos, eps, k);
        let ok = got.len() == want.len()
            && got.entries.iter().zip(&want).all(|(e, (id, s))| e.candidate_id == *id && (e.similarity - s).abs() <= 1e-12);
        *bad.entry("retrieve_candidates").or_default() += usize::from(!ok);
    }
    for i in 0..100 {
        let q = rng.random_range(1..100);
        let c = q + rng.random_range(0..20);
        let coarse = i % 2 == 0;
        let scores = Tensor::from_fn(q, c, |_, _| {
            let v: f64 = rng.random_range(-1.0..1.0);
            if coarse {
                (v * 3.0).round() / 3.0
            } else {
                v
            }
        })
        .unwrap();
        let truth: Vec<usize> = (0..q).map(|_| rng.random_range(0..c)).collect();
        let m = RetrievalMetrics::from_ranking(&RankingResult::from_scores(&scores, &truth).unwrap()).unwrap();
        let r = metrics_ref(&scores, &truth);
        let pairs = [(m.r1, r.recall[0]), (m.r5, r.recall[1]), (m.r10, r.recall[2]), (m.map, r.map), (m.mrr, r.mrr), (m.ndcg10, r.ndcg10)];
        let ok = pairs.iter().all(|(a, b)| (a - b).abs() <= 1e-12);
        *bad.entry("metrics").or_default() += usize::from(!ok);
    }
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let q = rng.random_range(0.01..1.0);
        let levels = rng.random_range(2..50u32);
        let delta = Tensor::from_fn(n, n, |_, _| f64::from(rng.random_range(0..levels)) / f64::from(levels)).unwrap();
        let mut got = cla::select_omega(&delta, q).unwrap();
        got.sort();
        *bad.entry("select_omega").or_default() += usize::from(got != omega_ref(delta.data(), q));
    }
    for seed in 0..100u64 {
        let corpus = generate(&CorpusSpec {
            n_pairs: 12 + seed as usize % 20,
            seed,
            ..Default::default()
        })
        .unwrap();
        let params = EncoderParams::init(corpus.encoder_dims(16, 8), &mut ChaCha8Rng::seed_from_u64(seed + 100));
        let probes = margin::select_probes(corpus.len(), 1 + seed as usize % 8, seed);
        let hard: Vec<Vec<usize>> = probes
            .iter()
            .map(|&p| (0..rng.random_range(1..5)).map(|_| (p + rng.random_range(1..corpus.len())) % corpus.len()).collect())
            .collect();
        let got = margin::margin_delta(&params, &corpus, &probes, &hard).unwrap();
        let want = margin_ref(&params, &corpus, &probes, &hard);
        *bad.entry("margin_delta").or_default() += usize::from((got - want).abs() > 1e-12);
    }
    let secs = t.elapsed().as_secs_f64();
    let mismatches: usize = bad.values().sum();
    verdict(mismatches == 0 && secs < 30.0, format!("mismatches {bad:?} over 4x100 instances, {secs:.1} s"))
}

fn curriculum(runs: &[ArmRun], secs: f64) -> Verdict {
    let r = |a: Arm| r1_by_seed(runs, a.name());
    let (base, bns, cla, bacl) = (r(Arm::Baseline), r(Arm::Bns), r(Arm::Cla), r(Arm::Bacl));
    let gaps = [("bacl-bns", &bacl, &bns), ("bns-baseline", &bns, &base), ("bacl-cla", &bacl, &cla), ("cla-baseline", &cla, &base)];
    let mut pass = secs < 900.0;
    let mut detail = Vec::new();
    for (name, a, b) in gaps {
        let (m, s) = paired_gap(a, b);
        pass &= m - 2.0 * s > 0.0;
        detail.push(format!("{name} {m:+.4}±{s:.4}"));
    }
    let means: Vec<String> = [("baseline", &base), ("bns", &bns), ("cla", &cla), ("bacl", &bacl)]
        .iter()
        .map(|(n, v)| format!("{n} {:.4}", mean_std(v).0))
        .collect();
    verdict(pass, format!("R@1 {}; gaps {}; {secs:.0} s", means.join(", "), detail.join(", ")))
}

fn schedules(cfg: &ExperimentConfig, ablation: &[ArmRun]) -> Verdict {
    let (train, heldout) = cfg.corpora().unwrap();
    let default_is_template = cfg.schedule_for(SchedulePreset::Default) == cfg.train.schedule();
    let specs: Vec<_> = experiments::schedule_specs(cfg)
        .into_iter()
        .filter(|s| !(default_is_template && s.label == SchedulePreset::Default.name()))
        .collect();
    let mut runs = experiments::run_all(&specs, &train, &heldout, None).unwrap();
    if default_is_template {
        runs.extend(ablation.iter().filter(|r| r.arm == Arm::Bacl).cloned().map(|mut r| {
            r.label = SchedulePreset::Default.name().to_string();
            r
        }));
    }
    let mean = |p: SchedulePreset| mean_std(&r1_by_seed(&runs, p.name())).0;
    let (d, s, a) = (mean(SchedulePreset::Default), mean(SchedulePreset::Shallow), mean(SchedulePreset::Aggressive));
    verdict(d >= s && d >= a, format!("R@1 default {d:.4}, shallow {s:.4}, aggressive {a:.4}"))
}

fn mining(cfg: &ExperimentConfig) -> Verdict {
    let (train, heldout) = cfg.corpora().unwrap();
    let out = experiments::mining(cfg, &train, &heldout).unwrap();
    let mut pass = true;
    let mut detail = Vec::new();
    for &k in &cfg.mining.k_list {
        let pts: Vec<_> = out.points.iter().filter(|p| p.k == k).collect();
        let fpr_down = pts.windows(2).all(|w| w[1].fpr < w[0].fpr);
        let recall_up = pts.windows(2).all(|w| w[1].recall_at_10 >= w[0].recall_at_10);
        pass &= fpr_down && recall_up;
        let fprs: Vec<String> = pts.iter().map(|p| format!("{:.4}", p.fpr)).collect();
        detail.push(format!("k={k} fpr [{}] recall@10 {:.4}->{:.4}", fprs.join(" "), pts[0].recall_at_10, pts[pts.len() - 1].recall_at_10));
    }
    verdict(pass, detail.join("; "))
}

fn contraction(cfg: &ExperimentConfig) -> Verdict {
    let (train, heldout) = cfg.corpora().unwrap();
    let out = experiments::contraction(cfg, &train, &heldout).unwrap();
    match out.margin_fit {
        Ok(f) => verdict(
            f.slope < 0.0 && f.r_squared >= 0.8,
            format!("log delta vs eta^2 over {} epochs: slope {:.3e}, r^2 {:.3}", f.points, f.slope, f.r_squared),
        ),
        Err(e) => verdict(false, format!("fit failed: {e}")),
    }
}

fn sampler() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let u: Vec<f64> = (0..12).map(|_| rng.random_range(-0.5..0.5)).collect();
    let d: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
    let s = SchedulePreset::Default.with_eta0(8.0);
    let early = bns::sampled_difficulty(&u, &d, bns::alpha(&s, 0.0), 0.3, 10_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let late = bns::sampled_difficulty(&u, &d, bns::alpha(&s, 20.0), 0.3, 10_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let se = (early.1.powi(2) + late.1.powi(2)).sqrt();
    let z = (late.0 - early.0) / se;
    let mid_err = SchedulePreset::ALL
        .iter()
        .map(|p| {
            let s = p.with_eta0(8.0);
            (bns::alpha(&s, 8.0) - 0.5 * (s.alpha_early + s.alpha_late)).abs()
        })
        .fold(0.0, f64::max);
    verdict(z > 3.0 && mid_err <= 1e-12, format!("difficulty early {:.4} late {:.4} (z {z:.1}); midpoint error {mid_err:.1e}", early.0, late.0))
}

fn ael(runs: &[ArmRun]) -> Verdict {
    let cov = |a: Arm| -> Vec<f64> { runs.iter().filter(|r| r.arm == a).map(|r| r.ael.as_ref().unwrap().coverage).collect() };
    let (base, bacl) = (cov(Arm::Baseline), cov(Arm::Bacl));
    let (m, s) = paired_gap(&bacl, &base);
    verdict(
        m - 2.0 * s > 0.0,
        format!("coverage baseline {:.4}, bacl {:.4}, gap {m:+.4}±{s:.4}", mean_std(&base).0, mean_std(&bacl).0),
    )
}

fn scaling(cfg: &ExperimentConfig) -> Verdict {
    let (rows, _) = experiments::scaling(cfg).unwrap();
    let ns = &cfg.scaling.n_list;
    let risk = |a: Arm, n: usize| rows.iter().find(|r| r.arm == a && r.n == n).unwrap().mean_risk;
    let mut pass = true;
    for &n in &ns[ns.len() - 2..] {
        pass &= risk(Arm::Bacl, n) <= risk(Arm::Baseline, n);
    }
    for a in [Arm::Bacl, Arm::Baseline] {
        pass &= ns.windows(2).all(|w| risk(a, w[1]) < risk(a, w[0]));
    }
    let series = |a: Arm| ns.iter().map(|&n| format!("{:.4}", risk(a, n))).collect::<Vec<_>>().join(" ");
    verdict(pass, format!("risk bacl [{}], baseline [{}]", series(Arm::Bacl), series(Arm::Baseline)))
}

fn csv_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "bin") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let work = tempfile::tempdir().unwrap();
    let cfg = work.path().join("exp.json");
    let train = serde_json::json!({"epochs": 3, "batch_size": 8, "warmup_epochs": 1, "probe_anchors": 8, "lipschitz_probes": 2, "d_embed": 16, "d_attn": 8, "policy_hidden": 8});
    let corpus = serde_json::json!({"n_pairs": 60, "d_latent": 16, "m_tokens": 8, "l_tokens": 8, "rho": 0.3, "epsilon_gen": 0.1, "noise_sigma": 0.1, "seed": 3});
    std::fs::write(
        &cfg,
        serde_json::json!({
            "corpus": corpus,
            "train": train,
            "seeds": [0, 1],
            "mining": {"eps_list": [0.4, 0.1], "k_list": [5], "probe_epochs": 1},
            "scaling": {"n_list": [30, 40, 50], "seeds": [0, 1, 2], "heldout_pairs": 30, "arms": ["bacl", "baseline"]}
        })
        .to_string(),
    )
    .unwrap();
    let spec = work.path().join("spec.json");
    std::fs::write(&spec, corpus.to_string()).unwrap();
    let tcfg = work.path().join("train.json");
    std::fs::write(&tcfg, train.to_string()).unwrap();
    let s = |p: &Path| p.to_str().unwrap().to_string();

    let run_all = |root: &Path| -> Result<(), String> {
        let corpus_bin = root.join("corpus.bin");
        let ckpt = root.join("train/ckpt_3.bin");
        let mut cmds: Vec<Vec<String>> = vec![
            vec!["gen".into(), "--spec".into(), s(&spec), "--out".into(), s(&corpus_bin)],
            vec!["--out-dir".into(), s(&root.join("train")), "train".into(), "--config".into(), s(&tcfg), "--corpus".into(), s(&corpus_bin)],
            vec!["--out-dir".into(), s(&root.join("eval")), "eval".into(), "--checkpoint".into(), s(&ckpt), "--corpus".into(), s(&corpus_bin)],
            vec!["--out-dir".into(), s(&root.join("dump")), "dump-index".into(), "--checkpoint".into(), s(&ckpt), "--corpus".into(), s(&corpus_bin)],
        ];
        for name in experiments::EXPERIMENTS {
            cmds.push(vec!["--out-dir".into(), s(&root.join("exp")), "experiment".into(), name.into(), "--config".into(), s(&cfg)]);
        }
        for args in cmds {
            let o = Command::new(env!("CARGO_BIN_EXE_bacl")).args(&args).output().map_err(|e| e.to_string())?;
            if !o.status.success() {
                return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
            }
        }
        Ok(())
    };
    let (a, b) = (work.path().join("a"), work.path().join("b"));
    if let Err(e) = run_all(&a).and_then(|_| run_all(&b)) {
        return verdict(false, e);
    }
    let (fa, fb) = (csv_files(&a), csv_files(&b));
    let differing: Vec<_> = fa.iter().filter(|(k, v)| fb.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let csvs = fa.keys().filter(|k| k.extension().is_some_and(|x| x == "csv")).count();
    verdict(
        differing.is_empty() && fa.len() == fb.len() && csvs > 0,
        format!("{csvs} csv files across 10 commands, differing {differing:?}"),
    )
}

fn main() {
    // `cargo test -- <filter>` passes arguments; a filter that does not
    // name this suite skips it.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !args.is_empty() && !args.iter().any(|a| "acceptance".contains(a.as_str())) {
        return;
    }
    // ACCEPTANCE_ONLY=3,8 runs a subset.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));

    let cfg = ExperimentConfig::default();
    cfg.validate().unwrap();
    let mut hard_failures = Vec::new();
    let mut report = |id: usize, hard: bool, f: &mut dyn FnMut() -> Verdict| {
        if !wanted(id) {
            return;
        }
        let t = Instant::now();
        let v = f();
        println!(
            "criterion {id:>2}: {} [{:.1} s] {}",
            if v.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            v.detail
        );
        if hard && !v.pass {
            hard_failures.push(id);
        }
    };

    report(1, true, &mut gradients);
    report(2, true, &mut oracles);

    let t = Instant::now();
    let ablation = if [3, 4, 8].into_iter().any(wanted) {
        let (train, heldout) = cfg.corpora().unwrap();
        experiments::run_all(&experiments::ablation_specs(&cfg), &train, &heldout, Some(cfg.ael_top_frac)).unwrap()
    } else {
        Vec::new()
    };
    let ablation_secs = t.elapsed().as_secs_f64();
    report(3, false, &mut || curriculum(&ablation, ablation_secs));
    report(4, false, &mut || schedules(&cfg, &ablation));
    report(5, false, &mut || mining(&cfg));
    report(6, false, &mut || contraction(&cfg));
    report(7, true, &mut sampler);
    report(8, false, &mut || ael(&ablation));
    report(9, false, &mut || scaling(&cfg));
    report(10, true, &mut determinism);

    if !hard_failures.is_empty() {
        eprintln!("property criteria failed: {hard_failures:?}");
        std::process::exit(1);
    }
}
