use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bacl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bacl")).args(args).output().unwrap()
}

fn write(path: &Path, v: &Value) {
    std::fs::write(path, serde_json::to_vec(v).unwrap()).unwrap();
}

fn tiny_spec() -> Value {
    json!({"n_pairs": 40, "d_latent": 16, "m_tokens": 8, "l_tokens": 8, "rho": 0.3, "epsilon_gen": 0.1, "noise_sigma": 0.1, "seed": 4})
}

fn tiny_train() -> Value {
    json!({"epochs": 2, "batch_size": 8, "warmup_epochs": 1, "probe_anchors": 8, "lipschitz_probes": 2, "d_embed": 16, "d_attn": 8, "policy_hidden": 8})
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Every CSV under `dir` carries `hash` in its last column.
fn assert_hash_column(dir: &Path, hash: &str) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "csv") {
            let text = std::fs::read_to_string(&p).unwrap();
            let mut lines = text.lines();
            assert!(lines.next().unwrap().ends_with(",config_hash"), "{}", p.display());
            for l in lines {
                assert!(l.ends_with(hash), "{}", p.display());
            }
        }
    }
}

#[test]
fn bad_input_exits_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    assert_eq!(bacl(&["gen", "--spec", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(bacl(&["experiment", "no-such-thing"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    write(&bad, &json!({"epochs": 2, "unknown_key": 1}));
    assert_eq!(bacl(&["train", "--config", bad.to_str().unwrap(), "--dry-run"]).status.code(), Some(2));
    let invalid = dir.path().join("invalid.json");
    write(&invalid, &json!({"batch_size": 1}));
    assert_eq!(bacl(&["train", "--config", invalid.to_str().unwrap(), "--dry-run"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_status_three() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, &tiny_spec());
    let cfg = dir.path().join("train.json");
    let mut c = tiny_train();
    c["lr"] = json!(1e300);
    c["optimizer"] = json!({"kind": "sgd"});
    write(&cfg, &c);
    let out = dir.path().join("run");
    let o = bacl(&["--out-dir", out.to_str().unwrap(), "train", "--config", cfg.to_str().unwrap(), "--spec", spec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn dry_run_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let spec = dir.path().join("spec.json");
    write(&spec, &tiny_spec());
    let o = bacl(&["--dry-run", "--out-dir", out.to_str().unwrap(), "gen", "--spec", spec.to_str().unwrap()]);
    assert!(o.status.success());
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(printed["n_pairs"], 40);
    for args in [vec!["train"], vec!["experiment", "ablation"], vec!["experiment", "scaling"]] {
        let mut full = vec!["--dry-run", "--out-dir", out.to_str().unwrap()];
        full.extend(args);
        assert!(bacl(&full).status.success());
    }
    assert!(!out.exists());
}

#[test]
fn gen_is_reproducible_and_seed_overrides_the_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, &tiny_spec());
    let run = |name: &str, seed: Option<&str>| {
        let out = dir.path().join(name).join("corpus.bin");
        let mut args = vec!["gen", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        assert!(bacl(&args).status.success());
        (std::fs::read(&out).unwrap(), manifest(out.parent().unwrap()))
    };
    let (a, ma) = run("a", None);
    let (b, mb) = run("b", None);
    let (c, mc) = run("c", Some("77"));
    assert_eq!(a, b);
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_ne!(a, c);
    assert_ne!(ma["config_hash"], mc["config_hash"]);
    assert_eq!(mc["seed"], 77);
    let sidecar: Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/corpus.bin.json")).unwrap()).unwrap();
    assert_eq!(sidecar["n_pairs"], 40);
}

#[test]
fn train_eval_and_dump_index_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    write(&spec, &tiny_spec());
    let corpus = dir.path().join("corpus.bin");
    assert!(bacl(&["gen", "--spec", spec.to_str().unwrap(), "--out", corpus.to_str().unwrap()]).status.success());
    let cfg = dir.path().join("train.json");
    write(&cfg, &tiny_train());
    let run = dir.path().join("run");
    let o = bacl(&[
        "--out-dir",
        run.to_str().unwrap(),
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--arm",
        "bacl",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&run);
    let hash = m["config_hash"].as_str().unwrap().to_string();
    assert_hash_column(&run, &hash);
    for f in ["losses.csv", "sampler.csv", "margin.csv", "metrics.csv", "report.json", "ckpt_2.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let margin = std::fs::read_to_string(run.join("margin.csv")).unwrap();
    assert_eq!(margin.lines().count(), 4);
    assert!(margin.lines().next().unwrap().starts_with("epoch,delta_eta,bar_alpha,kappa_report"));

    let ckpt = run.join("ckpt_2.bin");
    let ev = dir.path().join("eval");
    let o = bacl(&["--out-dir", ev.to_str().unwrap(), "eval", "--checkpoint", ckpt.to_str().unwrap(), "--corpus", corpus.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_hash_column(&ev, manifest(&ev)["config_hash"].as_str().unwrap());

    let dump = dir.path().join("dump");
    let o = bacl(&["--out-dir", dump.to_str().unwrap(), "dump-index", "--checkpoint", ckpt.to_str().unwrap(), "--corpus", corpus.to_str().unwrap()]);
    assert!(o.status.success());
    let x = std::fs::read_to_string(dump.join("index_x.csv")).unwrap();
    assert_eq!(x.lines().count(), 41);
    assert_eq!(x.lines().next().unwrap().split(',').count(), 2 + 16 + 1);

    // Resuming from the checkpoint continues from its state.
    let again = dir.path().join("again");
    let o = bacl(&[
        "--out-dir",
        again.to_str().unwrap(),
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--corpus",
        corpus.to_str().unwrap(),
        "--init-from",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_ne!(manifest(&again)["config_hash"], m["config_hash"]);
}

#[test]
fn small_experiment_writes_tables_plots_and_per_arm_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    write(
        &cfg,
        &json!({
            "corpus": tiny_spec(),
            "train": tiny_train(),
            "seeds": [0, 1],
            "ablation_arms": ["baseline", "bacl"]
        }),
    );
    let out = dir.path().join("out");
    let o = bacl(&["--out-dir", out.to_str().unwrap(), "experiment", "ablation", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let root = out.join("ablation");
    let hash = manifest(&root)["config_hash"].as_str().unwrap().to_string();
    assert_hash_column(&root, &hash);
    let summary = std::fs::read_to_string(root.join("ablation.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(std::fs::read_to_string(root.join("ablation.svg")).unwrap().starts_with("<svg"));
    for arm in ["baseline", "bacl"] {
        assert_eq!(manifest(&root.join(arm))["config_hash"], hash.as_str());
        assert_hash_column(&root.join(arm).join("seed-1"), &hash);
    }
}
