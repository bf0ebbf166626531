use std::path::PathBuf;
use std::process::ExitCode;

use branchnet::config::{threads_from_env, ExperimentConfig, THREADS_ENV};
use branchnet::render::{render, PlotSpec};
use branchnet::run::{run_sweep, write_outputs};
use branchnet::{presets, Error, Result};
use clap::{Parser, Subcommand};

/// Theory sweeps and HMC cross-checks for parallel-branching networks.
#[derive(Parser)]
#[command(name = "branchnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep from a config file or a preset name.
    Run {
        config: String,
        /// Worker threads (defaults to all cores).
        #[arg(long, env = THREADS_ENV)]
        threads: Option<usize>,
        /// Output directory (overrides the config and the environment).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Render a plot spec against a results CSV.
    Render { csv: PathBuf, spec: PathBuf },
    /// Check a config file without running it.
    Validate { config: String },
    /// Shipped configurations.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    /// List preset names.
    List,
    /// Print a preset as TOML.
    Show { name: String },
}

fn load_config(arg: &str) -> Result<ExperimentConfig> {
    let path = PathBuf::from(arg);
    if !path.exists() {
        if let Some(p) = presets::find(arg) {
            return Ok(p.config());
        }
    }
    ExperimentConfig::load(&path)
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            threads,
            output_dir,
        } => {
            let cfg = load_config(&config)?;
            let threads = threads.or_else(threads_from_env);
            let result = run_sweep(&cfg, threads)?;
            let dir = output_dir.unwrap_or_else(|| cfg.resolved_output_dir());
            let csv = write_outputs(&result, &dir)?;
            println!("{}", csv.display());
            match result.hmc_failures() {
                0 => Ok(()),
                failed => Err(Error::Hmc { failed }),
            }
        }
        Command::Render { csv, spec } => {
            let spec = PlotSpec::load(&spec)?;
            let out = render(&csv, &spec)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let points = cfg.sweep.widths.len() * cfg.sweep.sigma_w.len();
            println!(
                "{}: ok ({} sweep points, scenario {})",
                cfg.name,
                points,
                cfg.scenario.as_str()
            );
            Ok(())
        }
        Command::Presets { action } => {
            match action {
                PresetAction::List => {
                    for p in presets::PRESETS {
                        println!("{:<16} {}", p.name, p.description);
                    }
                }
                PresetAction::Show { name } => {
                    let p = presets::find(&name).ok_or_else(|| {
                        Error::config("preset", format!("unknown preset `{name}`"))
                    })?;
                    print!("{}", p.config().to_toml());
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
