use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use weakcd_cli::commands;
use weakcd_cli::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "weakcd", version, about = "Weakly supervised change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_pairs: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        change_rate: Option<f64>,
        /// Per-pixel noise standard deviation.
        #[arg(long)]
        noise: Option<f64>,
        /// No noise and no photometric shift.
        #[arg(long)]
        noiseless: bool,
    },
    /// Fit the pixel and image models with EM; writes a checkpoint to --out.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Predict labels and masks; writes <id>.png and scores.csv into --out.
    Infer {
        #[command(flatten)]
        common: Common,
    },
    /// Score a predictions directory; writes report tables into --out.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed foreground proportion; nearest-neighbour estimate when absent.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    knn_k: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            manifest: self.manifest.clone(),
            model: self.model.clone(),
            out: self.out.clone(),
            seed: self.seed,
            tau: self.tau,
            knn_k: self.knn_k,
            rounds: self.rounds,
            threads: self.threads,
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut log = |m: &str| eprintln!("{m}");
    match cli.command {
        Command::Synth {
            common,
            n_pairs,
            size,
            change_rate,
            noise,
            noiseless,
        } => {
            let mut cfg = common.resolve()?;
            let s = &mut cfg.synth;
            s.n_pairs = n_pairs.unwrap_or(s.n_pairs);
            s.size = size.unwrap_or(s.size);
            s.change_rate = change_rate.unwrap_or(s.change_rate);
            s.noise = noise.unwrap_or(s.noise);
            if noiseless {
                s.noise = 0.0;
                s.jitter = 0.0;
            }
            cfg.validate()?;
            let path = commands::synth(&cfg)?;
            log(&format!("wrote {}", path.display()));
        }
        Command::Train { common } => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            let path = commands::train(&cfg, &mut log)?;
            log(&format!("wrote {}", path.display()));
        }
        Command::Infer { common } => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            let rows = commands::infer(&cfg, common.config.is_some())?;
            let changed = rows.iter().filter(|r| r.label.is_change()).count();
            log(&format!("{} pairs, {} labeled changed", rows.len(), changed));
        }
        Command::Eval { common, predictions } => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            let s = commands::eval(&cfg, &predictions)?;
            let ap = s.ap.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            println!(
                "n {}  AP {}  accuracy {:.4}  mIOU {:.4}  change IoU {:.4}  best DT mIOU {:.4} at {}",
                s.n, ap, s.accuracy, s.miou, s.iou_change, s.dt_best_miou, s.dt_best_threshold
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
