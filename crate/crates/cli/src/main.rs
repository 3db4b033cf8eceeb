//! Command-line front end: run experiments, generate datasets, validate
//! configurations.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedktl_core::config::{Ablation, ExperimentConfig};
use fedktl_core::data::{make_synthetic_dataset, write_dataset_file};
use fedktl_core::experiment::run_experiment;
use fedktl_core::Error;

#[derive(Parser)]
#[command(name = "fedktl", version, about = "Desk-scale prototype knowledge-transfer federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a JSON config.
    Run(RunArgs),
    /// Generate a synthetic dataset file in the KTLD format.
    GenData(GenDataArgs),
    /// Check a config file against the schema and exit.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to a ktl-config/1 JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's ablation switch (none, -lim, -lmse, -lmmd,
    /// -etf, -qbar, +cs, *la).
    #[arg(long, allow_hyphen_values = true)]
    ablation: Option<String>,
    /// Output directory for rounds.csv, summary.json, config.resolved.json.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Directory for KTLW/KTLI generator bridge files.
    #[arg(long)]
    bridge: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Synthetic dataset parameters as KEY=VALUE pairs:
    /// C=<classes> d=<dim> per-class=<count> [spread=<f64>] [seed=<u64>].
    #[arg(long, num_args = 1.., value_name = "KEY=VALUE", required = true)]
    synthetic: Vec<String>,
    /// Destination .ktld path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::GenData(args) => cmd_gen_data(args),
        Command::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut cause = std::error::Error::source(&err);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            if matches!(err, Error::Config(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let mut config = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(name) = &args.ablation {
        config.ablation = name.parse::<Ablation>()?;
    }
    config.validate()?;
    let bundle = run_experiment(&config, Some(&args.out), args.bridge.as_deref())?;
    println!(
        "{} seed(s), {} rounds: weighted accuracy {:.4} ± {:.4}",
        bundle.runs.len(),
        config.rounds,
        bundle.summary.mean_final_weighted_accuracy,
        bundle.summary.std_final_weighted_accuracy,
    );
    println!("wrote {}", args.out.join("rounds.csv").display());
    println!("wrote {}", args.out.join("summary.json").display());
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), Error> {
    let mut classes: Option<u32> = None;
    let mut dim: Option<usize> = None;
    let mut per_class: Option<usize> = None;
    let mut spread = 0.35f64;
    let mut seed = 0u64;
    for token in &args.synthetic {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got {token:?}")))?;
        let parse_err = |e: String| Error::Config(format!("{key}={value}: {e}"));
        match key {
            "C" => classes = Some(value.parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?),
            "d" => dim = Some(value.parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?),
            "per-class" => {
                per_class = Some(value.parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?)
            }
            "spread" => spread = value.parse().map_err(|e: std::num::ParseFloatError| parse_err(e.to_string()))?,
            "seed" => seed = value.parse().map_err(|e: std::num::ParseIntError| parse_err(e.to_string()))?,
            other => return Err(Error::Config(format!("unknown synthetic parameter {other:?}"))),
        }
    }
    let classes = classes.ok_or_else(|| Error::Config("missing C=<classes>".into()))?;
    let dim = dim.ok_or_else(|| Error::Config("missing d=<dim>".into()))?;
    let per_class = per_class.ok_or_else(|| Error::Config("missing per-class=<count>".into()))?;
    let dataset = make_synthetic_dataset::<f32>(classes, dim, per_class, spread, seed)
        .map_err(|e| Error::Config(e.to_string()))?;
    write_dataset_file(&dataset, &args.out)?;
    println!(
        "wrote {} ({} samples, {} classes, dim {})",
        args.out.display(),
        dataset.len(),
        classes,
        dim
    );
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> Result<(), Error> {
    let config = load_config(&args.config)?;
    println!(
        "{} is a valid {} config ({} clients, {} rounds, ablation {})",
        args.config.display(),
        config.schema,
        config.clients,
        config.rounds,
        config.ablation
    );
    Ok(())
}
