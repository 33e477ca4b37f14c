//! The `experiment` subcommand: runs a protocol from `bacl_core::experiments`
//! and writes its tables, plots and manifests under `<out-dir>/<name>/`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use bacl_core::eval::studies::MiningPoint;
use bacl_core::experiments::{self, ArmRun, ArmSummary, ContractionRow, ExperimentConfig};
use bacl_core::trainer::Arm;

use crate::commands::{metrics_table, print_json, write_train_tables};
use crate::output::{config_hash, num, opt, Artifacts, RunManifest, Table};
use crate::svg::{bar_chart, line_chart, Series};
use crate::{Cli, ExperimentName};

pub fn run(cli: &Cli, argv: &[String], name: ExperimentName, cfg: ExperimentConfig) -> Result<()> {
    if cli.dry_run {
        return print_json(&cfg);
    }
    let start = Instant::now();
    let dir = cli.out_dir.join(name.as_str());
    let hash = config_hash(&(name.as_str(), &cfg))?;
    let mut art = Artifacts::new(&dir, hash.clone());
    match name {
        ExperimentName::Ablation => {
            let (train, heldout) = cfg.corpora()?;
            let runs = experiments::run_all(&experiments::ablation_specs(&cfg), &train, &heldout, None)?;
            arm_tables(&mut art, argv, "ablation", &runs, start)?;
        }
        ExperimentName::ScheduleSweep => {
            let (train, heldout) = cfg.corpora()?;
            let runs = experiments::run_all(&experiments::schedule_specs(&cfg), &train, &heldout, None)?;
            arm_tables(&mut art, argv, "schedule", &runs, start)?;
            let mut t = Table::new(&["schedule", "alpha_early", "alpha_late", "gamma", "eta0"]);
            for &p in &cfg.schedules {
                let s = cfg.schedule_for(p);
                t.push(vec![p.name().into(), num(s.alpha_early), num(s.alpha_late), num(s.gamma), num(s.eta0)]);
            }
            art.csv("schedules.csv", &t)?;
        }
        ExperimentName::Ael => {
            let (train, heldout) = cfg.corpora()?;
            let runs = experiments::run_all(&experiments::ael_specs(&cfg), &train, &heldout, Some(cfg.ael_top_frac))?;
            arm_tables(&mut art, argv, "ael", &runs, start)?;
        }
        ExperimentName::Mining => {
            let (train, heldout) = cfg.corpora()?;
            let outcome = experiments::mining(&cfg, &train, &heldout)?;
            art.csv("base_metrics.csv", &metrics_table("heldout", &outcome.base))?;
            let mut t = Table::new(&["epsilon", "k", "candidates", "fpr", "fpr_mined", "recall_at_10"]);
            for p in &outcome.points {
                t.push(vec![num(p.epsilon), p.k.to_string(), p.candidates.to_string(), num(p.fpr), num(p.fpr_mined), num(p.recall_at_10)]);
            }
            art.csv("mining.csv", &t)?;
            let by_k = |f: &dyn Fn(&MiningPoint) -> f64| -> Vec<Series> {
                cfg.mining
                    .k_list
                    .iter()
                    .map(|&k| Series {
                        name: format!("k={k}"),
                        points: outcome.points.iter().filter(|p| p.k == k).map(|p| (p.epsilon, f(p))).collect(),
                    })
                    .collect()
            };
            art.svg("mining_fpr.svg", &line_chart("False-positive rate of mined negatives", "epsilon", "FPR", &by_k(&|p| p.fpr)))?;
            art.svg("mining_recall.svg", &line_chart("Held-out recall after fine-tuning", "epsilon", "R@10", &by_k(&|p| p.recall_at_10)))?;
        }
        ExperimentName::Contraction => {
            let (train, heldout) = cfg.corpora()?;
            let outcome = experiments::contraction(&cfg, &train, &heldout)?;
            let mut t = Table::new(&["epoch", "eta_sq", "delta_eta", "log_delta_eta", "bar_alpha", "kappa_report", "alignment_error", "log_alignment_error"]);
            t.push(vec!["0".into(), "0".into(), num(outcome.initial_delta), num(outcome.initial_delta.ln()), String::new(), String::new(), String::new(), String::new()]);
            for r in &outcome.rows {
                let eta = r.epoch as f64;
                t.push(vec![
                    r.epoch.to_string(),
                    num(eta * eta),
                    num(r.delta_eta),
                    num(r.delta_eta.ln()),
                    num(r.bar_alpha),
                    num(r.kappa_report),
                    num(r.alignment_error),
                    num(r.alignment_error.ln()),
                ]);
            }
            art.csv("contraction.csv", &t)?;
            let mut f = Table::new(&["quantity", "eta0", "slope", "intercept", "r_squared", "points", "error"]);
            for (label, fit) in [("delta_eta", &outcome.margin_fit), ("alignment_error", &outcome.error_fit)] {
                match fit {
                    Ok(c) => f.push(vec![label.into(), num(outcome.eta0), num(c.slope), num(c.intercept), num(c.r_squared), c.points.to_string(), String::new()]),
                    Err(e) => f.push(vec![label.into(), num(outcome.eta0), String::new(), String::new(), String::new(), "0".into(), e.clone()]),
                }
            }
            art.csv("contraction_fit.csv", &f)?;
            let after: Vec<_> = outcome.rows.iter().filter(|r| r.epoch as f64 > outcome.eta0).collect();
            let sq = |r: &ContractionRow| (r.epoch as f64).powi(2);
            art.svg(
                "contraction_margin.svg",
                &line_chart(
                    "Margin after the schedule centre",
                    "eta^2",
                    "log delta_eta",
                    &[Series {
                        name: "log delta".into(),
                        points: after.iter().map(|r| (sq(r), r.delta_eta.ln())).collect(),
                    }],
                ),
            )?;
            art.svg(
                "contraction_error.svg",
                &line_chart(
                    "Alignment error after the schedule centre",
                    "eta^2",
                    "log(1 - R@10)",
                    &[Series {
                        name: "log error".into(),
                        points: after.iter().map(|r| (sq(r), r.alignment_error.ln())).collect(),
                    }],
                ),
            )?;
        }
        ExperimentName::Scaling => {
            let (rows, runs) = experiments::scaling(&cfg)?;
            let mut t = Table::new(&["arm", "n", "mean_risk", "std_risk", "excess_mean", "seeds"]);
            for r in &rows {
                t.push(vec![r.arm.name().into(), r.n.to_string(), num(r.mean_risk), num(r.std_risk), num(r.excess_mean), r.seeds.to_string()]);
            }
            art.csv("scaling.csv", &t)?;
            let mut t = Table::new(&["arm", "n", "seed", "risk"]);
            for r in &runs {
                t.push(vec![r.arm.name().into(), r.n.to_string(), r.seed.to_string(), num(r.risk)]);
            }
            art.csv("scaling_runs.csv", &t)?;
            let mut arms: Vec<Arm> = Vec::new();
            for r in &rows {
                if !arms.contains(&r.arm) {
                    arms.push(r.arm);
                }
            }
            let series: Vec<Series> = arms
                .iter()
                .map(|&a| Series {
                    name: a.name().into(),
                    points: rows
                        .iter()
                        .filter(|r| r.arm == a && r.excess_mean > 0.0)
                        .map(|r| ((r.n as f64).ln(), r.excess_mean.ln()))
                        .collect(),
                })
                .collect();
            art.svg("scaling.svg", &line_chart("Excess triplet risk", "log n", "log excess risk", &series))?;
        }
    }
    RunManifest::new(&format!("experiment {}", name.as_str()), argv, &hash, cfg.seeds[0], &art.written, start.elapsed()).write(&dir)?;
    println!("wrote {} file(s) to {}", art.written.len() + 1, dir.display());
    Ok(())
}

/// Per-run and per-label tables, one bar chart, and a subdirectory per label
/// holding its training logs and manifest.
fn arm_tables(art: &mut Artifacts, argv: &[String], stem: &str, runs: &[ArmRun], start: Instant) -> Result<()> {
    let mut t = Table::new(&["label", "arm", "seed", "r1", "r5", "r10", "map", "mrr", "ndcg10", "ael", "ael_pairs"]);
    for r in runs {
        let m = &r.heldout;
        t.push(vec![
            r.label.clone(),
            r.arm.name().into(),
            r.seed.to_string(),
            num(m.r1),
            num(m.r5),
            num(m.r10),
            num(m.map),
            num(m.mrr),
            num(m.ndcg10),
            opt(r.ael.map(|a| a.coverage)),
            r.ael.map(|a| a.pairs.to_string()).unwrap_or_default(),
        ]);
    }
    art.csv(&format!("{stem}_runs.csv"), &t)?;
    let summary = experiments::summarise(runs);
    art.csv(&format!("{stem}.csv"), &summary_table(&summary))?;
    let ael = summary.iter().all(|s| s.mean_ael.is_some());
    let bars: Vec<(String, f64, f64)> = summary
        .iter()
        .map(|s| match (ael, s.mean_ael, s.std_ael) {
            (true, Some(m), Some(sd)) => (s.label.clone(), m, sd),
            _ => (s.label.clone(), s.mean_r1, s.std_r1),
        })
        .collect();
    let (title, y) = if ael { ("Attention localisation", "AEL") } else { ("Held-out retrieval", "R@1") };
    art.svg(&format!("{stem}.svg"), &bar_chart(title, y, &bars))?;
    for s in &summary {
        let sub = art.dir.join(label_dir(&s.label));
        let mut sub_art = Artifacts::new(&sub, art.hash.clone());
        for r in runs.iter().filter(|r| r.label == s.label) {
            let seed_dir = sub.join(format!("seed-{}", r.seed));
            let mut a = Artifacts::new(&seed_dir, art.hash.clone());
            write_train_tables(&mut a, &r.epochs, r.initial_delta, &r.margin)?;
            a.csv("metrics.csv", &metrics_table("heldout", &r.heldout))?;
            sub_art.written.extend(a.written);
        }
        let seed = runs.iter().find(|r| r.label == s.label).map(|r| r.seed).unwrap_or(0);
        let manifest = RunManifest::new(&format!("experiment {stem} {}", s.label), argv, &art.hash, seed, &sub_art.written, start.elapsed()).write(&sub)?;
        art.note(manifest);
        art.written.extend(sub_art.written);
    }
    Ok(())
}

fn summary_table(summary: &[ArmSummary]) -> Table {
    let mut t = Table::new(&["label", "arm", "seeds", "mean_r1", "std_r1", "mean_r10", "mean_mrr", "mean_ael", "std_ael"]);
    for s in summary {
        t.push(vec![
            s.label.clone(),
            s.arm.name().into(),
            s.seeds.to_string(),
            num(s.mean_r1),
            num(s.std_r1),
            num(s.mean_r10),
            num(s.mean_mrr),
            opt(s.mean_ael),
            opt(s.std_ael),
        ]);
    }
    t
}

fn label_dir(label: &str) -> PathBuf {
    let clean: String = label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    Path::new(&clean).to_path_buf()
}
