//! `fusionq` CLI: gen-scenes | train | eval | ablate | bench-sparsity | report.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fusionq::config::ExperimentConfig;
use fusionq::experiments;

#[derive(Parser)]
#[command(name = "fusionq", about = "Query-based camera/LiDAR fusion on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: ./out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene files (JSON Lines, one file per sequence).
    GenScenes(Common),
    /// Train a model; writes loss.csv and checkpoint.bin.
    Train(Common),
    /// Evaluate a checkpoint; writes report.json, mse_layers.csv, timings.json.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (default: <out>/checkpoint.bin).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train+eval every cell of the configured ablation grid.
    Ablate(Common),
    /// Count sparse pillars against the dense BEV grid.
    BenchSparsity(Common),
    /// Render plots and a Markdown summary from an artifacts directory.
    Report {
        /// Artifacts directory (default: ./out).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_cfg(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn is_config_error(err: &anyhow::Error) -> bool {
    if let Some(core) = err.downcast_ref::<fusionq_core::Error>() {
        return matches!(core, fusionq_core::Error::Config(_) | fusionq_core::Error::Parse { .. });
    }
    err.downcast_ref::<toml::de::Error>().is_some()
        || err.to_string().contains("cannot read config")
        || err.to_string().contains("config")
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenScenes(c) => {
            let cfg = load_cfg(&c)?;
            experiments::run_gen_scenes(&cfg, &experiments::out_dir(c.out))
        }
        Command::Train(c) => {
            let cfg = load_cfg(&c)?;
            experiments::run_train(&cfg, &experiments::out_dir(c.out))
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_cfg(&common)?;
            let out = experiments::out_dir(common.out);
            let ckpt = checkpoint.unwrap_or_else(|| out.join("checkpoint.bin"));
            experiments::run_eval(&cfg, &out, &ckpt)
        }
        Command::Ablate(c) => {
            let cfg = load_cfg(&c)?;
            experiments::run_ablate(&cfg, &experiments::out_dir(c.out))
        }
        Command::BenchSparsity(c) => {
            let cfg = load_cfg(&c)?;
            experiments::run_bench_sparsity(&cfg, &experiments::out_dir(c.out))
        }
        Command::Report { out } => experiments::run_report(&experiments::out_dir(out)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_config_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
