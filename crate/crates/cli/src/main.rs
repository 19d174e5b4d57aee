//! `magrt`: scenario-driven experiments for transport on simple magnetic systems.

mod artifact;
mod commands;
mod error;
mod json;
mod scenario;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Command;
use error::CliError;
use scenario::Scenario;

#[derive(Parser, Debug)]
#[command(name = "magrt", version, about = "Forward and inverse transport experiments on simple magnetic systems")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Scenario file (TOML).
    #[arg(long, global = true)]
    scenario: Option<PathBuf>,
    /// Override a scenario value, e.g. `--set grids.spatial=[8,16]`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory for reports and artifacts (overrides `output.dir`).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Worker threads; 1 runs every loop sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice (overrides `run.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Sub {
    /// Trace magnetic geodesics and check them against exact orbits.
    Trace,
    /// Compare phase-space integrals with their boundary forms.
    Santalo,
    /// Solve the forward transport problem and check the operator bounds.
    Forward,
    /// Assemble the albedo matrix and write it as a binary artifact.
    Albedo,
    /// Split the albedo into ballistic, single and multiple scattering.
    Decompose,
    /// Recover the attenuation (and scattering in three dimensions) from albedo data.
    Invert,
    /// Check that gauge-equivalent pairs share one albedo.
    Gauge,
    /// Run the stability estimates on a perturbation sweep.
    Stability,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Trace => Command::Trace,
            Sub::Santalo => Command::Santalo,
            Sub::Forward => Command::Forward,
            Sub::Albedo => Command::Albedo,
            Sub::Decompose => Command::Decompose,
            Sub::Invert => Command::Invert,
            Sub::Gauge => Command::Gauge,
            Sub::Stability => Command::Stability,
        }
    }
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Config("--threads must be at least 1".into()));
    }
    if n == 1 {
        magrt::par::force_sequential(true);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    let path = cli.scenario.as_ref().ok_or_else(|| CliError::Config("--scenario is required".into()))?;
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    let scenario = Scenario::load(path, &overrides)?;
    let cmd = Command::from(cli.command);
    let (outcome, sink) = commands::run(cmd, &scenario, cli.output_dir.as_deref())?;
    let written = sink.write_report(&outcome.report)?;
    println!("{}", written.display());
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(outcome.failures.join("; ")))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("magrt: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
