use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use netsense::experiment::{format_summary, preset, run_scenario, summarize_dir, write_outputs, PRESET_NAMES};
use netsense::{Error, ExperimentConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUN: u8 = 3;

#[derive(Parser)]
#[command(name = "netsense", version, about = "Simulate network-adaptive gradient compression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy by bandwidth cell of a preset or config file.
    Run {
        /// Preset name (static-bw, degrading-bw, fluctuating-bw) or path to a TOML config.
        target: String,
        /// Replace the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to out/<experiment name>.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Set a config value, e.g. `training.steps=200` (repeatable).
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Recompute the summary table of a finished run directory.
    Summarize { dir: PathBuf },
    /// Check a config file without running it.
    ValidateConfig { path: PathBuf },
}

/// A failure tagged with the exit code it maps to.
struct Failure {
    code: u8,
    err: Error,
}

fn config_err(err: Error) -> Failure {
    Failure { code: EXIT_CONFIG, err }
}

fn run_err(err: Error) -> Failure {
    let code = if matches!(err, Error::Config(_)) { EXIT_CONFIG } else { EXIT_RUN };
    Failure { code, err }
}

fn resolve(target: &str, seed: Option<u64>, overrides: &[String]) -> Result<ExperimentConfig, Error> {
    let base = match preset(target) {
        Some(cfg) => cfg,
        None if Path::new(target).exists() => ExperimentConfig::load(Path::new(target))?,
        None => {
            return Err(Error::Config(format!(
                "`{target}` is neither a preset ({}) nor a config file",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    let mut all: Vec<String> = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    base.with_overrides(&all)
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run {
            target,
            seed,
            out_dir,
            overrides,
        } => {
            let cfg = resolve(&target, seed, &overrides).map_err(config_err)?;
            let out_dir = out_dir.unwrap_or_else(|| Path::new("out").join(&cfg.name));
            let cells = run_scenario(&cfg).map_err(run_err)?;
            let rows = write_outputs(&cfg, &cells, &out_dir).map_err(run_err)?;
            print!("{}", format_summary(&rows));
            eprintln!("wrote {} cells to {}", cells.len(), out_dir.display());
        }
        Command::Summarize { dir } => {
            let rows = summarize_dir(&dir).map_err(run_err)?;
            print!("{}", format_summary(&rows));
        }
        Command::ValidateConfig { path } => {
            let cfg = ExperimentConfig::load(&path).map_err(config_err)?;
            println!(
                "{}: ok ({} strategies x {} bandwidths)",
                path.display(),
                cfg.strategies.len(),
                cfg.bandwidths.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.err);
            ExitCode::from(f.code)
        }
    }
}
