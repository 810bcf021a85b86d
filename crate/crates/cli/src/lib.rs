//! Library side of the `lp2s` command-line tool: configuration, the solve
//! pipeline and the subcommands.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{Delta0, ExperimentConfig, Overrides};

#[derive(Debug, Parser)]
#[command(name = "lp2s", version, about = "LP-induced two-stage best-arm identification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the LP and write solution.json, actions.csv and thresholds.csv.
    Solve(Common),
    /// Run the Monte Carlo study and write episodes.csv and summary.csv.
    Simulate(Common),
    /// Budget-matched comparison against LP2S; writes compare.csv.
    Compare(Common),
    /// Evaluate bound formulas for the instance; writes bounds.csv.
    Bounds {
        #[command(flatten)]
        common: Common,
        /// Solution file from `solve`, to check f* against its bound.
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Print the tightest feasible delta0.
    #[command(name = "min-delta0")]
    MinDelta0(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON experiment config; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent episodes (does not change results).
    #[arg(long, default_value_t = 1)]
    pub parallelism: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long = "K")]
    pub k: Option<usize>,
    #[arg(long = "R")]
    pub r: Option<usize>,
    #[arg(long = "L")]
    pub l: Option<f64>,
    /// A number or `auto`.
    #[arg(long)]
    pub delta0: Option<Delta0>,
    #[arg(long)]
    pub mu0: Option<f64>,
    /// pac, srm or fc.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub a: Option<f64>,
    #[arg(long)]
    pub b: Option<f64>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

impl Common {
    pub fn load(&self) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            arms: self.k,
            rounds: self.r,
            survivors: self.l,
            delta0: self.delta0,
            mu0: self.mu0,
            variant: self.variant.clone(),
            a: self.a,
            b: self.b,
            seed: self.seed,
            episodes: self.episodes,
            out: self.out.clone(),
        })?;
        Ok(cfg)
    }
}

/// Runs a parsed command and returns the lines to print.
pub fn run(cli: &Cli) -> anyhow::Result<Vec<String>> {
    match &cli.command {
        Command::Solve(c) => commands::cmd_solve(&c.load()?),
        Command::Simulate(c) => commands::cmd_simulate(&c.load()?, c.parallelism),
        Command::Compare(c) => commands::cmd_compare(&c.load()?, c.parallelism),
        Command::Bounds { common, solution } => commands::cmd_bounds(&common.load()?, solution.as_deref()),
        Command::MinDelta0(c) => commands::cmd_min_delta0(&c.load()?),
    }
}
