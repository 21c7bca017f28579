//! Argument parsing and dispatch for the `coda` binary.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::commands;
use crate::config::{Overrides, RunConfig};
use crate::error::Result;
use crate::metrics;

#[derive(Debug, Parser)]
#[command(name = "coda", version, about = "Co-regularized domain alignment experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Run directory (default: $CODA_OUT/<variant>-seed<seed>).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "NAME")]
    pub variant: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub iterations: Option<u64>,
    /// Neighbour counts for the feature probe, comma separated.
    #[arg(long, global = true, value_name = "LIST", value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the domain pair and write it as CSV.
    Gen,
    /// Train and write metrics plus a checkpoint.
    Train,
    /// Refine a trained model on target data.
    Dirtt {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// PCA + kNN probe of a checkpoint's features.
    Probe {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Render SVG plots and CSV curves from a metrics file.
    Plot {
        /// Metrics JSONL (default: the run directory's metrics file).
        metrics: Option<PathBuf>,
    },
    /// Train every cell of the configured hyperparameter grid.
    Grid,
}

impl Cli {
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        base.resolve(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            variant: self.variant.clone(),
            iterations: self.iterations,
            k: self.k.clone(),
        })
    }
}

/// Runs one command, printing a short report on stdout.
pub fn run(cli: &Cli) -> Result<()> {
    let config = cli.resolve_config()?;
    match &cli.command {
        Command::Gen => {
            for p in commands::cmd_gen(&config)? {
                println!("{}", p.display());
            }
        }
        Command::Train => {
            let o = commands::cmd_train(&config)?;
            if let Some(r) = o.records.last() {
                println!("{}", metrics::to_line(r));
            }
            println!("run directory: {}", o.dir.display());
        }
        Command::Dirtt { checkpoint } => {
            let records = commands::cmd_dirtt(&config, checkpoint.as_deref())?;
            if let Some(r) = records.last() {
                println!("{}", metrics::to_line(r));
            }
        }
        Command::Eval { checkpoint } => {
            println!("{}", metrics::to_line(&commands::cmd_eval(&config, checkpoint.as_deref())?));
        }
        Command::Probe { checkpoint } => {
            for k in commands::cmd_probe(&config, checkpoint.as_deref())? {
                println!("k={} acc={:.4}", k.k, k.acc);
            }
        }
        Command::Plot { metrics } => {
            let report = commands::cmd_plot(&config, metrics.as_deref())?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            for p in &report.written {
                println!("{}", p.display());
            }
        }
        Command::Grid => {
            for r in commands::cmd_grid(&config)? {
                println!(
                    "cell {} lambda_d={} lambda_p={} lambda_div={} nu={} acc_tgt_1={:.4}",
                    r.cell, r.lambda_d, r.lambda_p, r.lambda_div, r.nu, r.acc_tgt_1
                );
            }
        }
    }
    Ok(())
}
