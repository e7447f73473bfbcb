mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Overrides;
use error::{CliError, Result};

/// Random-shift tests of independence between two spatial components.
#[derive(Debug, Parser)]
#[command(name = "rshift", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Override a configuration entry by dotted path, e.g. `options.N=999`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one replicate of a registered model and write its data files.
    Simulate,
    /// Run one independence test on two datasets.
    Test,
    /// Run a rejection-rate experiment and write its tables.
    Experiment,
    /// Draw the global envelope of a functional test result as SVG.
    EnvelopePlot {
        /// Result JSON written by `test`.
        result: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.workers == Some(0) {
        return Err(CliError::Usage("--workers must be at least 1".into()));
    }
    let o = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        workers: cli.workers,
    };
    match cli.command {
        Command::Simulate => {
            let loaded = config::load(cli.config.as_deref(), &cli.sets)?;
            for p in commands::simulate(loaded, &o)? {
                println!("{}", p.display());
            }
        }
        Command::Test => {
            let loaded = config::load(cli.config.as_deref(), &cli.sets)?;
            let run = in_pool(cli.workers, || commands::test(loaded, &o))?;
            println!("p-value: {}", run.result.p_value);
            println!("strategy: {}", run.result.strategy);
            log::info!("result written to {}", run.path.display());
        }
        Command::Experiment => {
            let loaded = config::load(cli.config.as_deref(), &cli.sets)?;
            for p in commands::experiment(loaded, &o)? {
                println!("{}", p.display());
            }
        }
        Command::EnvelopePlot { result } => {
            let name = result
                .file_stem()
                .map(|s| format!("{}.svg", s.to_string_lossy()))
                .unwrap_or_else(|| "envelope.svg".into());
            let out = match &cli.out {
                Some(d) => {
                    std::fs::create_dir_all(d)?;
                    d.join(name)
                }
                None => result.with_file_name(name),
            };
            let plotted = plot::envelope_plot(&result, &out)?;
            if !plotted.coherent {
                log::warn!(
                    "observed curve and p = {} disagree about the envelope (ties in the extreme ranks)",
                    plotted.p_value
                );
            }
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn in_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Io(e.to_string()))?
            .install(f),
        None => f(),
    }
}
