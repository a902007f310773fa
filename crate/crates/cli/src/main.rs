//! `cbmauc`: data generation, training, grid search, sweeps, evaluation,
//! saliency export and run comparison.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 training
//! diverged, 3 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use cbm_auc::CoreError;
use clap::{Parser, Subcommand};

mod commands;
mod manifest;
mod report;

#[derive(Debug, Parser)]
#[command(name = "cbmauc", version, about = "Concept bottleneck models with unsupervised concepts")]
pub struct Cli {
    /// TOML file with [data], [model], [grid] and [sweep] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset directory (as written by gen-data). Without it, datasets are
    /// generated from the [data] section and cached under CBMAUC_CACHE.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true, default_value = "cbmauc-out")]
    pub out: PathBuf,
    /// Overrides the seed of the command (data seed for gen-data, model seed otherwise).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, env = "CBMAUC_CACHE", global = true, hide = true)]
    pub cache: Option<PathBuf>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and its train/val/test splits.
    GenData,
    /// Train one model; writes the best checkpoint, logs and test metrics.
    Train {
        #[arg(long)]
        model: Option<cbm_auc::ModelKind>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Hyperparameter grid, ranked by mean validation metric.
    Grid {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, default_value_t = 1000)]
        max_runs: usize,
    },
    /// Limited-supervision sweep over D_ex; writes CSV and a PNG plot.
    Sweep {
        /// Comma-separated D_ex values; defaults to [sweep] or 3,2,1,0.
        #[arg(long, value_delimiter = ',')]
        d_ex: Option<Vec<usize>>,
        #[arg(long)]
        seeds: Option<usize>,
        /// Only redraw the plot from an existing sweep CSV.
        #[arg(long)]
        from_csv: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Grad-CAM overlays for concept units (or logits) on test images.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of leading test images.
        #[arg(long, default_value_t = 8)]
        images: usize,
        /// Comma-separated unit indices; defaults to every concept unit.
        #[arg(long, value_delimiter = ',')]
        units: Option<Vec<usize>>,
        /// Target task logits instead of concept units.
        #[arg(long)]
        logits: bool,
    },
    /// Aggregate completed training runs into a mean ± 2σ table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::NonFinite { .. } => 2,
                CoreError::Io { .. } | CoreError::Format { .. } => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let div = anyhow::Error::new(CoreError::NonFinite {
            term: "task",
            epoch: 0,
            step: 3,
        });
        assert_eq!(exit_code(&div), 2);
        let io = anyhow::Error::new(CoreError::io(
            std::path::Path::new("x"),
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
        assert_eq!(exit_code(&io), 3);
        assert_eq!(exit_code(&anyhow::Error::new(CoreError::InvalidConfig(vec!["k".into()]))), 1);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 1);
        let wrapped = anyhow::Error::new(std::io::Error::from(std::io::ErrorKind::PermissionDenied)).context("writing");
        assert_eq!(exit_code(&wrapped), 3);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::parse_from(["cbmauc", "--jobs", "2", "sweep", "--d-ex", "3,1"]);
        assert_eq!(cli.jobs, 2);
        assert!(matches!(cli.cmd, Command::Sweep { d_ex: Some(ref v), .. } if v == &[3, 1]));
    }
}
