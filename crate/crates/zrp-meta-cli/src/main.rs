//! `zrp-meta run <command> --config <path>`: config-driven experiments with reproducible artifacts.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{RunError, COMMANDS};
use config::{ConfigError, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "zrp-meta", version, about = "Metastability experiments for condensing zero-range processes")]
struct Cli {
    #[command(subcommand)]
    action: Action,
}

#[derive(Subcommand, Debug)]
enum Action {
    /// Run one experiment; artifacts go to `<out>/<config hash>/`.
    Run {
        #[arg(value_parser = clap::builder::PossibleValuesParser::new(COMMANDS))]
        command: String,
        #[arg(long)]
        config: PathBuf,
        /// Output root.
        #[arg(long, env = "ZRP_META_OUT", default_value = "runs")]
        out: PathBuf,
        /// Worker threads for sweeps; defaults to the available parallelism.
        #[arg(long)]
        threads: Option<usize>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn execute(command: &str, config: &PathBuf, out: &PathBuf, threads: Option<usize>, seed: Option<u64>) -> Result<PathBuf, RunError> {
    let text = std::fs::read_to_string(config).map_err(|e| ConfigError::Unreadable(format!("{}: {e}", config.display())))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let model = commands::build_model(&cfg)?;
    let threads = threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    let hash = cfg.hash();
    let report = commands::run(command, &cfg, &model, cfg.seed, threads)?;
    let dir = out.join(&hash);
    let cfg_value = serde_json::to_value(&cfg).map_err(std::io::Error::other)?;
    output::write_report(&dir, command, &hash, cfg.seed, &cfg_value, &report)?;
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Action::Run { command, config, out, threads, seed } = cli.action;
    match execute(&command, &config, &out, threads, seed) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
