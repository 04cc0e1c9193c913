use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hsimamba::pipeline::{
    self, run_eval, run_gen_synth, run_make_splits, run_predict_map, run_train,
};
use hsimamba::runconfig::RunConfig;

/// Cluster-guided spatial-spectral state-space classifier for
/// hyperspectral images.
#[derive(Parser)]
#[command(name = "hsimamba", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration file (key=value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, pipeline::AppError> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and emit the log, metrics, maps, and checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Override clusters per class (ablation arm).
        #[arg(long)]
        clusters_per_class: Option<usize>,
        /// Drop the cluster loss term (cross-entropy only).
        #[arg(long)]
        ce_only: bool,
        /// Replace attention ordering with raster order.
        #[arg(long)]
        no_attention: bool,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the whole-image classification maps for a checkpoint.
    PredictMap {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Materialize the deterministic train/val/test splits.
    MakeSplits {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate the synthetic benchmark container.
    GenSynth {
        /// Output directory for synthetic.hsib.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run() -> Result<(), pipeline::AppError> {
    match Cli::parse().command {
        Command::Train {
            config,
            clusters_per_class,
            ce_only,
            no_attention,
            epochs,
        } => {
            let mut cfg = config.load()?;
            if let Some(cpc) = clusters_per_class {
                cfg.train.clusters_per_class = cpc;
            }
            if ce_only {
                cfg.train.use_cluster_loss = false;
            }
            if no_attention {
                cfg.train.use_attention = false;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let artifacts = run_train(&cfg)?;
            println!(
                "trained {} epochs | test OA {:.2}% AA {:.2}% Kappa {:.2}",
                artifacts.epoch_records.len(),
                artifacts.metrics.oa * 100.0,
                artifacts.metrics.aa * 100.0,
                artifacts.metrics.kappa * 100.0
            );
            println!("wrote {}", artifacts.metrics_report.display());
            println!("wrote {}", artifacts.log.display());
            println!("wrote {}", artifacts.checkpoint.display());
            println!("wrote {}", artifacts.map_ppm.display());
            println!("wrote {}", artifacts.map_pgm.display());
        }
        Command::Eval { config, checkpoint } => {
            let cfg = config.load()?;
            let (metrics, report) = run_eval(&cfg, &checkpoint)?;
            println!(
                "test OA {:.2}% AA {:.2}% Kappa {:.2}",
                metrics.oa * 100.0,
                metrics.aa * 100.0,
                metrics.kappa * 100.0
            );
            println!("wrote {}", report.display());
        }
        Command::PredictMap { config, checkpoint } => {
            let cfg = config.load()?;
            let (ppm, pgm) = run_predict_map(&cfg, &checkpoint)?;
            println!("wrote {}", ppm.display());
            println!("wrote {}", pgm.display());
        }
        Command::MakeSplits { config } => {
            let cfg = config.load()?;
            let path = run_make_splits(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::GenSynth { out_dir, seed } => {
            let path = run_gen_synth(&out_dir, seed)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
