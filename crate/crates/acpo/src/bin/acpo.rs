//! Pipeline driver: generate -> curate -> train -> eval -> report.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data error,
//! 4 numerical abort.

use acpo::error::{Error, Result};
use acpo::io::config::RunConfig;
use acpo::pipeline;
use acpo::train::Phase;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "acpo",
    about = "Audio-contrastive preference optimization on a deterministic toy audio-visual model",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (flat key=value with section prefixes).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory shared by all stages.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,

    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, captions, and vocabulary sidecar.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Build preference pairs and the similarity-tier report.
    Curate {
        #[command(flatten)]
        common: Common,
    },
    /// Train a phase: pretrain, acpo, sft, dpo, or omnidpo.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        phase: String,
    },
    /// Evaluate a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate; defaults to the acpo checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the pair-type ablation grid.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Frame-count dominance sweep for a checkpoint.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => {
            let cfg = common.load()?;
            pipeline::run_gen(&cfg, &common.out, common.force)?;
            println!("wrote corpus, captions, vocab under {}", common.out.display());
        }
        Command::Curate { common } => {
            let cfg = common.load()?;
            pipeline::run_curate(&cfg, &common.out, common.force)?;
            println!("wrote pairs and tier report under {}", common.out.display());
        }
        Command::Train { common, phase } => {
            let cfg = common.load()?;
            let phase = Phase::from_name(&phase).ok_or_else(|| {
                Error::Config(format!(
                    "unknown phase {phase:?}; expected pretrain, acpo, sft, dpo, or omnidpo"
                ))
            })?;
            pipeline::run_train(&cfg, &common.out, phase, common.force)?;
            println!(
                "wrote {} checkpoint and training log under {}",
                phase.name(),
                common.out.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.load()?;
            let paths = pipeline::OutPaths::new(&common.out);
            let ckpt = checkpoint.unwrap_or_else(|| paths.checkpoint(Phase::Acpo));
            let (report, _) = pipeline::run_eval(&cfg, &common.out, &ckpt, common.force)?;
            println!(
                "qa accuracy {:.4}, f1 {:.4}; wrote report, summary, predictions under {}",
                report.qa.accuracy,
                report.qa.f1,
                common.out.display()
            );
        }
        Command::Ablate { common } => {
            let cfg = common.load()?;
            let rows = pipeline::run_ablate(&cfg, &common.out, common.force)?;
            for row in &rows {
                println!(
                    "{}: accuracy {:.4}, f1 {:.4}",
                    row.variant, row.metrics.accuracy, row.metrics.f1
                );
            }
        }
        Command::Sweep { common, checkpoint } => {
            let cfg = common.load()?;
            let paths = pipeline::OutPaths::new(&common.out);
            let ckpt = checkpoint.unwrap_or_else(|| paths.checkpoint(Phase::Acpo));
            let sweep = pipeline::run_sweep(&cfg, &common.out, &ckpt, common.force)?;
            for (n_frames, acc) in sweep {
                println!("frames {n_frames}: accuracy {acc:.4}");
            }
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
