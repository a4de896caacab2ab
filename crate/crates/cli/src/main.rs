use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rfprint_cli::{Pipeline, PipelineError, RunConfig};

/// Channel-agnostic RF fingerprinting pipeline.
///
/// Every flag can also be set through an `RFPRINT_`-prefixed environment
/// variable (`RFPRINT_CONFIG`, `RFPRINT_SEED`, `RFPRINT_JOBS`, `RFPRINT_OUT`);
/// flags win over the environment, which wins over the config file.
#[derive(Debug, Parser)]
#[command(name = "rfprint", version)]
struct Cli {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long, global = true, env = "RFPRINT_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true, env = "RFPRINT_SEED")]
    seed: Option<u64>,
    /// Parallel per-device translator trainings.
    #[arg(long, global = true, env = "RFPRINT_JOBS", default_value_t = 1)]
    jobs: usize,
    /// Run directory holding every artifact.
    #[arg(long, global = true, env = "RFPRINT_OUT")]
    out: Option<PathBuf>,
    /// Suppress progress lines on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic IQ dataset.
    Simulate,
    /// Slice both domains and record per-device counts.
    Slice,
    /// Write the seeded split manifest.
    Split,
    /// Train the base-domain classifier.
    TrainBaseline,
    /// Train and customize one translator per device.
    TrainReveal,
    /// Score same-domain, raw, translated and Max-Rule accuracy.
    Evaluate,
    /// Feed each device's slices through every other device's translator.
    Adversarial,
    /// Summarize the reports as a table.
    Report,
    /// Run every stage, reusing valid artifacts.
    RunAll,
    /// Print the effective config as JSON.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let config = load_config(cli)?;
    if let Command::ShowConfig = cli.command {
        config.validate()?;
        println!(
            "{}",
            serde_json::to_string_pretty(&config).expect("config serializes")
        );
        println!("# hash {}", config.hash());
        return Ok(());
    }
    let out = config
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("rfprint-out"));
    let mut p = Pipeline::new(config, out, cli.jobs)?;
    p.quiet = cli.quiet;
    match cli.command {
        Command::Simulate => p.simulate().map(drop),
        Command::Slice => p.slice().map(drop),
        Command::Split => p.split().map(drop),
        Command::TrainBaseline => p.train_baseline().map(drop),
        Command::TrainReveal => p.train_reveal().map(drop),
        Command::Evaluate => p.evaluate().map(drop),
        Command::Adversarial => p.adversarial().map(drop),
        Command::Report => p.report().map(|s| print!("{}", s.to_markdown())),
        Command::RunAll => p.run_all().map(|s| print!("{}", s.to_markdown())),
        Command::ShowConfig => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rfprint: {e}");
            // the top line already shows the direct source
            let mut source = std::error::Error::source(&e).and_then(|s| s.source());
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
