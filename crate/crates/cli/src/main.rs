mod commands;
mod error;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spg_core::config::ExperimentConfig;
use spg_core::eval::ablation::AblationKind;

use crate::commands::Pipeline;
use crate::error::{CliError, CliResult};
use crate::store::RunDir;

/// Soft prompt generation on a synthetic domain-generalisation benchmark.
#[derive(Parser)]
#[command(name = "spg", version)]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run with this seed; repeat for several. Replaces the config's seeds.
    #[arg(long = "seed", global = true)]
    seeds: Vec<u64>,
    /// Root of the output tree; the config's `out_dir` when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config key, e.g. `--set pipeline.cgan.epochs=70`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Name of the run directory; defaults to `cfg-<config hash prefix>`.
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the benchmark world of every seed.
    GenData,
    /// Stage I: fit one prompt label per source domain.
    TrainLabels,
    /// Stage II: train the prompt generator of every task.
    TrainCgan,
    /// Evaluate every configured design under the configured protocol.
    Evaluate,
    /// Run ablation grids (the configured kinds unless given).
    Ablate {
        #[arg(long = "kind", value_parser = parse_kind)]
        kinds: Vec<AblationKind>,
    },
    /// Domain clustering and prompt-to-image retrieval metrics.
    Analyze,
    /// The whole pipeline, in order.
    All,
}

fn parse_kind(s: &str) -> Result<AblationKind, String> {
    s.parse().map_err(|e: spg_core::Error| e.to_string())
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|source| CliError::Io {
            path: p.clone(),
            source,
        })?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if !cli.seeds.is_empty() {
        let list: Vec<String> = cli.seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("seeds=[{}]", list.join(", ")));
    }
    ExperimentConfig::from_toml(&text, &overrides).map_err(CliError::Config)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let run = RunDir::open(&out, cli.run_id.as_deref(), &cfg)?;
    eprintln!("spg: run directory {}", run.root.display());
    let p = Pipeline { run };
    match cli.command {
        Command::GenData => p.gen_data(),
        Command::TrainLabels => p.train_labels(),
        Command::TrainCgan => p.train_cgan(),
        Command::Evaluate => p.evaluate(),
        Command::Ablate { kinds } => {
            let kinds = if kinds.is_empty() {
                p.run.config.ablation.kinds.clone()
            } else {
                kinds
            };
            p.ablate(&kinds)
        }
        Command::Analyze => p.analyze(),
        Command::All => p.all(),
    }?;
    println!("{}", p.run.root.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
