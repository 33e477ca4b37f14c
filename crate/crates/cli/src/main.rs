mod commands;
mod experiment;
mod output;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "bacl", version, about = "Boundary-aware curriculum contrastive training on synthetic paired corpora")]
pub struct Cli {
    /// Root seed; replaces the seed of whatever config the command reads.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs")]
    pub out_dir: PathBuf,
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Validate inputs and print the resolved config without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ArmArg {
    Baseline,
    Bns,
    Cla,
    Bacl,
}

impl From<ArmArg> for bacl_core::trainer::Arm {
    fn from(a: ArmArg) -> Self {
        use bacl_core::trainer::Arm;
        match a {
            ArmArg::Baseline => Arm::Baseline,
            ArmArg::Bns => Arm::Bns,
            ArmArg::Cla => Arm::Cla,
            ArmArg::Bacl => Arm::Bacl,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Heldout,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModalityArg {
    X,
    Y,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    Ablation,
    ScheduleSweep,
    Mining,
    Contraction,
    Scaling,
    Ael,
}

impl ExperimentName {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::Ablation => "ablation",
            ExperimentName::ScheduleSweep => "schedule-sweep",
            ExperimentName::Mining => "mining",
            ExperimentName::Contraction => "contraction",
            ExperimentName::Scaling => "scaling",
            ExperimentName::Ael => "ael",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus from a spec file.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        /// Defaults to `<out-dir>/corpus.bin`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "train")]
        split: SplitArg,
    },
    /// Train one arm and write losses, sampler and margin logs, checkpoints
    /// and a report.
    Train {
        /// Training config (JSON); defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training corpus; generated from `--spec` (or defaults) when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Held-out corpus; regenerated from the training corpus's spec when absent.
        #[arg(long)]
        heldout: Option<PathBuf>,
        #[arg(long, value_enum)]
        arm: Option<ArmArg>,
        /// Resume parameters and optimizer state from a checkpoint.
        #[arg(long)]
        init_from: Option<PathBuf>,
        #[arg(long)]
        reindex_every: Option<usize>,
    },
    /// Retrieval metrics of a checkpoint on a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to the held-out split of `--spec` (or of the default spec).
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run a named experiment: CSVs, SVG plots and one manifest per arm.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write the embedding index of a corpus under a checkpoint as CSV.
    DumpIndex {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        modality: ModalityArg,
    },
}

/// Exit status: 2 for bad input or configuration, 3 for a numerical abort,
/// 1 for anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<bacl_core::Error>() {
            return match e {
                e if e.is_numerical_abort() => 3,
                bacl_core::Error::Numerics(_) => 1,
                _ => 2,
            };
        }
        if cause.is::<commands::UsageError>() || cause.is::<serde_json::Error>() || cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match commands::run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
