//! `sfdqn`: runs experiment configs and bundled presets, and re-checks
//! stored run directories.
//!
//! Exit codes: 0 on success, 2 for configuration problems, 1 for runtime
//! failures and failed verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sfdqn::experiment::{self, ExperimentConfig};
use sfdqn::Error;

#[derive(Parser)]
#[command(name = "sfdqn", version, about = "Successor-feature DQN laboratory on planted synthetic MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config file or a preset name.
    Run {
        /// Path to a config file, or the name of a bundled preset.
        config: String,
        /// Output directory. Defaults to the config's `output_dir`, else
        /// `runs/<name>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// List the bundled presets.
    Presets,
    /// Print a bundled preset's config.
    Preset { name: String },
    /// Re-check the invariants of a finished run directory.
    Verify { run_dir: PathBuf },
}

fn load(config: &str) -> sfdqn::Result<(ExperimentConfig, String)> {
    let path = Path::new(config);
    if !path.exists() {
        if let Some(p) = experiment::preset(config) {
            return Ok((ExperimentConfig::parse(p.toml)?, p.toml.to_string()));
        }
    }
    ExperimentConfig::load(path)
}

fn fail(e: Error, stage: &str) -> ExitCode {
    eprintln!("sfdqn {stage}: {e}");
    match e {
        Error::Config(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, out } => {
            let (cfg, src) = match load(&config) {
                Ok(x) => x,
                Err(e) => return fail(e, "config"),
            };
            let out = out.unwrap_or_else(|| cfg.default_output_dir());
            match experiment::run(&cfg, &src, &out) {
                Ok(summary) => {
                    println!("{}: {} seed(s) written to {}", cfg.experiment.name, summary.seeds.len(), out.display());
                    for f in &summary.csv_files {
                        println!("  {}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e, "run"),
            }
        }
        Command::Presets => {
            for p in experiment::presets() {
                println!("{:<24} {}", p.name, p.description);
            }
            ExitCode::SUCCESS
        }
        Command::Preset { name } => match experiment::preset(&name) {
            Some(p) => {
                print!("{}", p.toml);
                ExitCode::SUCCESS
            }
            None => fail(Error::Config(format!("unknown preset {name:?}; see `sfdqn presets`")), "config"),
        },
        Command::Verify { run_dir } => match experiment::verify(&run_dir) {
            Ok(checks) => {
                for c in &checks {
                    println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
                }
                let failed = checks.iter().filter(|c| !c.passed).count();
                println!("{} checks, {failed} failed", checks.len());
                if failed == 0 {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => fail(e, "verify"),
        },
    }
}
