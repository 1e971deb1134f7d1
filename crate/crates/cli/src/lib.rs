//! Command-line front end for the segmentation benchmark.
//!
//! Verbs: `analyze` (cost tables), `train`, `eval` and `benchmark`.
//! Configuration comes from a flat `key = value` file (see [`config`])
//! with a few command-line overrides.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands::{CliError, Result};
use crate::config::{parse_resolution, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "segbench", version = report::version(), about = "Analyze, train, evaluate and time segmentation models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Input resolution as HxW.
    #[arg(long, global = true, value_parser = parse_resolution)]
    pub resolution: Option<(usize, usize)>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cost comparison over the encoder/decoder grid.
    Analyze,
    /// Train and write a checkpoint plus loss log.
    Train {
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Steps to run; overrides the config.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Compute IoU metrics for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Time inference.
    Benchmark {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
    },
}

impl Cli {
    /// The config file with command-line overrides applied.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                ExperimentConfig::from_text(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(res) = self.resolution {
            match self.command {
                Command::Analyze => cfg.analyze.resolution = res,
                _ => cfg.data.resolution = res,
            }
        }
        match &self.command {
            Command::Train { steps: Some(s), .. } => cfg.steps = *s,
            Command::Benchmark { runs, warmup, .. } => {
                cfg.benchmark_runs = runs.unwrap_or(cfg.benchmark_runs);
                cfg.benchmark_warmup = warmup.unwrap_or(cfg.benchmark_warmup);
            }
            _ => {}
        }
        Ok(cfg)
    }

    /// Runs the command and returns a short human-readable summary.
    pub fn run(&self) -> Result<String> {
        let cfg = self.experiment()?;
        match &self.command {
            Command::Analyze => {
                let out = commands::analyze(&cfg)?;
                let mut s = format!("wrote {} and {}", out.csv_path.display(), out.markdown_path.display());
                for m in &out.skipped {
                    s.push_str(&format!("\nskipped {}: {}", m.model, m.reason));
                }
                Ok(s)
            }
            Command::Train { resume, .. } => {
                let out = commands::train(&cfg, resume.as_deref())?;
                let losses = match (out.state.loss_history.first(), out.state.loss_history.last()) {
                    (Some(a), Some(b)) => format!("loss {a:.4} -> {b:.4}"),
                    _ => "no steps run".to_string(),
                };
                Ok(format!(
                    "step {}, {losses}; wrote {} and {}",
                    out.state.step,
                    out.checkpoint.display(),
                    out.loss_log.display()
                ))
            }
            Command::Eval { checkpoint } => {
                let out = commands::evaluate(&cfg, checkpoint)?;
                Ok(format!(
                    "mIoU {:.4}, category mIoU {:.4}; wrote {}",
                    out.report.miou,
                    out.report.category_miou,
                    out.metrics_path.display()
                ))
            }
            Command::Benchmark { checkpoint, .. } => {
                let r = commands::benchmark(&cfg, checkpoint.as_deref())?;
                Ok(format!(
                    "{} at {}x{}: {:.3} +- {:.3} ms/frame, {:.2} frames/s over {} runs (hardware-dependent)",
                    r.model,
                    r.resolution.0,
                    r.resolution.1,
                    r.mean_ms,
                    r.stdev_ms,
                    r.fps,
                    r.samples_ms.len()
                ))
            }
        }
    }
}
