use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use kfaclab::harness::{self, ExperimentConfig, Verdict};

#[derive(Parser)]
#[command(name = "kfaclab", version, about = "K-FAC invariance experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network and its reparameterization side by side and print the
    /// invariance report as JSON.
    ///
    /// Exit status: 0 pass or report-only, 2 fail, 3 degenerate curvature,
    /// 1 for configuration or I/O errors.
    CheckInvariance {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured optimizer and write `step,objective` rows.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the Kronecker factors at the initial parameters as JSON.
    DumpFactors {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_FAIL: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;

fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::CheckInvariance { config } => {
            let config = load(&config)?;
            let report = match harness::run_invariance(&config) {
                Ok(r) => r,
                Err(e) if e.is_degenerate() => {
                    eprintln!("degenerate: {e}");
                    return Ok(ExitCode::from(EXIT_DEGENERATE));
                }
                Err(e) => return Err(e.into()),
            };
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(match report.verdict {
                Verdict::Pass | Verdict::ReportOnly => ExitCode::SUCCESS,
                Verdict::Fail => ExitCode::from(EXIT_FAIL),
                Verdict::Degenerate => ExitCode::from(EXIT_DEGENERATE),
            })
        }
        Command::Train { config, out } => {
            let rows = harness::run_training(&load(&config)?)?;
            let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut w = BufWriter::new(file);
            harness::write_training_csv(&rows, &mut w)?;
            w.flush()?;
            Ok(ExitCode::SUCCESS)
        }
        Command::DumpFactors { config } => {
            let metric = harness::initial_factors(&load(&config)?)?;
            io::stdout().write_all(harness::factors_json(&metric).as_bytes())?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
