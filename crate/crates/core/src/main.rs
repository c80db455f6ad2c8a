use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use synthhfl::data::DATA_ENV;
use synthhfl::harness::{self, presets, RunOptions};
use synthhfl::Error;

#[derive(Parser)]
#[command(name = "synthhfl", version, about = "Edge-association game and hierarchical federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a config file, a preset, or a preset with overrides.
    #[command(after_help = format!("The MNIST directory is read from ${DATA_ENV} (default: data/mnist).\n\
        Exit codes: 0 success, 2 config error, 3 non-convergence or divergence, 4 I/O error."))]
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        /// Overrides master_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Concurrent sweep runs.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// List the built-in presets.
    Presets,
}

fn run(config: Option<PathBuf>, preset: Option<String>, opts: RunOptions) -> Result<i32, Error> {
    let text = config
        .as_ref()
        .map(|p| std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e }))
        .transpose()?;
    let cfg = harness::load_config(text.as_deref(), preset.as_deref())?;
    let report = harness::run_experiment(&cfg, &opts)?;
    eprintln!("wrote {} files to {}", report.files.len() + 1, report.output_dir.display());
    if let Some(e) = &report.failure {
        eprintln!("error: {e}");
    }
    Ok(report.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Presets => {
            for p in presets::PRESETS {
                println!("{:<26} {}", p.name, p.summary);
            }
            0
        }
        Command::Run {
            config,
            preset,
            seed,
            out,
            jobs,
        } => {
            let opts = RunOptions {
                seed,
                out,
                jobs,
                data_root: None,
            };
            run(config, preset, opts).unwrap_or_else(|e| {
                eprintln!("error: {e}");
                e.exit_code()
            })
        }
    };
    ExitCode::from(code as u8)
}
