//! `crt-cea`: batch pipeline for cost-effectiveness analysis of cluster
//! randomized trials with missing outcomes.
//!
//! Exit codes: 0 success, 2 input error, 3 numerical failure.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clustered_cea::cea::LambdaGrid;
use clustered_cea::glmm::CostKind;
use clustered_cea::impute::Strategy;

use config::{Manifest, Overrides};
use stages::{InStage, StageError};

#[derive(Parser)]
#[command(name = "crt-cea", version, about = "Cost-effectiveness analysis for cluster randomized trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run manifest (TOML).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Seed for simulation and imputation; overrides the manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trial from the manifest's [simulate] section.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Screen missingness and outcome models for associated covariates.
    Diagnose {
        /// Trial CSV.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write K completed datasets per imputing strategy.
    Impute {
        /// Trial CSV.
        #[arg(long)]
        input: PathBuf,
        /// Strategies (comma separated); all imputing strategies by default.
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<Strategy>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the cost/QALY model to each completed dataset, or to the
    /// complete cases for `cc`.
    Fit {
        /// Directory of completed datasets, or the trial CSV for `cc`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        strategy: Strategy,
        /// Cost distributions (comma separated).
        #[arg(long, value_delimiter = ',')]
        dist: Vec<CostKind>,
        #[command(flatten)]
        common: Common,
    },
    /// Pool a fits file with Rubin's rules.
    Pool {
        /// Fits CSV.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Increments, INB and the INB curve from a pooled file.
    Cea {
        /// Pooled CSV.
        #[arg(long)]
        input: PathBuf,
        /// `start:stop:step` or a comma-separated list.
        #[arg(long)]
        lambda_grid: Option<LambdaGrid>,
        #[command(flatten)]
        common: Common,
    },
    /// The whole pipeline for every selected strategy and distribution.
    Run {
        /// Trial CSV; simulated from the manifest when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        strategy: Vec<Strategy>,
        #[arg(long, value_delimiter = ',')]
        dist: Vec<CostKind>,
        #[arg(long)]
        lambda_grid: Option<LambdaGrid>,
        #[command(flatten)]
        common: Common,
    },
}

fn non_empty<T>(v: Vec<T>) -> Option<Vec<T>> {
    (!v.is_empty()).then_some(v)
}

fn manifest(common: &Common, overrides: Overrides) -> Result<Manifest, StageError> {
    let overrides = Overrides {
        seed: common.seed,
        ..overrides
    };
    Manifest::load(common.spec.as_deref(), &overrides).stage("configuration")
}

fn execute(command: Command) -> Result<(), StageError> {
    match command {
        Command::Simulate { common } => {
            let m = manifest(&common, Overrides::default())?;
            stages::simulate(&m, &common.out).stage("simulate")?;
        }
        Command::Diagnose { input, common } => {
            let m = manifest(&common, Overrides::default())?;
            stages::diagnose(&m, &input, &common.out).stage("diagnose")?;
        }
        Command::Impute { input, strategy, common } => {
            let m = manifest(&common, Overrides::default())?;
            let strategies = non_empty(strategy)
                .unwrap_or_else(|| Strategy::ALL.into_iter().filter(|s| s.imputes()).collect());
            for s in strategies {
                stages::impute(&m, &input, s, &common.out).stage(format!("impute ({s})"))?;
            }
        }
        Command::Fit {
            input,
            strategy,
            dist,
            common,
        } => {
            let m = manifest(
                &common,
                Overrides {
                    distributions: non_empty(dist),
                    ..Default::default()
                },
            )?;
            for &kind in &m.distributions {
                stages::fit(&m, &input, strategy, kind, &common.out)
                    .stage(format!("fit ({})", stages::cell_name(strategy, kind)))?;
            }
        }
        Command::Pool { input, common } => {
            let m = manifest(&common, Overrides::default())?;
            stages::pool_fits_file(&m, &input, &common.out).stage("pool")?;
        }
        Command::Cea {
            input,
            lambda_grid,
            common,
        } => {
            let m = manifest(
                &common,
                Overrides {
                    lambda_grid,
                    ..Default::default()
                },
            )?;
            stages::cea(&m, &input, &common.out).stage("cea")?;
        }
        Command::Run {
            input,
            strategy,
            dist,
            lambda_grid,
            common,
        } => {
            let m = manifest(
                &common,
                Overrides {
                    strategies: non_empty(strategy),
                    distributions: non_empty(dist),
                    lambda_grid,
                    ..Default::default()
                },
            )?;
            let report = stages::run(&m, input.as_deref(), &common.out)?;
            let cells = m.strategies.len() * m.distributions.len();
            let failed = report.failures.len();
            let mut failures = report.failures.into_iter();
            if let Some(first) = failures.next() {
                for f in failures {
                    eprintln!("crt-cea: {f}");
                }
                eprintln!("crt-cea: {failed} of {cells} cells failed; see manifest.csv");
                return Err(first);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("crt-cea: {e}");
            ExitCode::from(if e.error.is_input_error() { 2 } else { 3 })
        }
    }
}
