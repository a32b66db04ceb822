use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use randlabel::config::{Axis, RunConfig};
use randlabel::experiment::{self, SweepAxis, RADEMACHER_FILE};
use randlabel::{Error, Result};

/// Random-label memorization experiments.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config and write its run directory.
    Run {
        config: PathBuf,
        /// Run directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a one- or two-axis grid and write `summary.csv`.
    Sweep {
        config: PathBuf,
        /// Axis name: lambda, delta, dropout, weight_decay, copy_depth, lr or seed. Repeat for a 2-D grid.
        #[arg(long, required = true)]
        axis: Vec<String>,
        /// Comma-separated values, one list per `--axis`.
        #[arg(long, required = true)]
        values: Vec<String>,
        /// Sweep directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate the network's empirical Rademacher value on a binary task and evaluate the bound.
    Rademacher { config: PathBuf },
    /// Summarize a run or sweep directory.
    Report { dir: PathBuf },
}

fn load(path: &PathBuf) -> Result<RunConfig> {
    let mut config = RunConfig::load(path)?;
    if let Some(base) = path.parent() {
        config.rebase_paths(base);
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, out } => {
            let config = load(&config)?;
            let report = experiment::run(&config, out.as_deref())?;
            print!("{}", experiment::report(&report.dir)?);
        }
        Command::Sweep { config, axis, values, out } => {
            if axis.len() != values.len() {
                return Err(Error::config("--values", format!("{} axes but {} value lists", axis.len(), values.len())));
            }
            let config = load(&config)?;
            let axes = axis
                .iter()
                .zip(&values)
                .map(|(a, v)| {
                    let axis = Axis::parse(a)?;
                    Ok(SweepAxis { axis, values: axis.parse_values(v)? })
                })
                .collect::<Result<Vec<_>>>()?;
            let dir = out.unwrap_or_else(|| config.output_dir.clone());
            let rows = experiment::sweep(&config, &axes, &dir)?;
            print!("{}", experiment::report(&dir)?);
            let failed = rows.iter().filter(|r| r.status != "ok").count();
            if failed > 0 {
                eprintln!("{failed} of {} runs failed; see the status column", rows.len());
            }
        }
        Command::Rademacher { config } => {
            let config = load(&config)?;
            let report = experiment::rademacher_run(&config)?;
            let json = serde_json::to_string_pretty(&report)?;
            fs::create_dir_all(&config.output_dir)?;
            fs::write(config.output_dir.join(RADEMACHER_FILE), &json)?;
            println!("{json}");
        }
        Command::Report { dir } => print!("{}", experiment::report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
