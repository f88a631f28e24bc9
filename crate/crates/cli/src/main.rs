use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use sanilab::nn::ArchName;

mod artifacts;
mod config;
mod detection;
mod report;
mod stages;

use config::{ArchChoice, ConfigError, ExperimentConfig};
use stages::Ctx;

/// Training-set sanitization, adversarial attacks and KL-divergence
/// detection experiments.
#[derive(Parser, Debug)]
#[command(name = "sanilab", version)]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Directory with the four MNIST IDX files, used when no config is given.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Model architecture; overrides the config.
    #[arg(long, global = true, value_parser = parse_arch)]
    arch: Option<ArchName>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Train the unsanitized model.
    Train,
    /// Build the augmented canonical set from the base glyphs.
    AugmentCanonical,
    /// Score, cull and train one sanitized model per threshold.
    Sanitize,
    /// Attack the selected models on the evaluation split.
    Attack,
    /// Calibrate a KL threshold per detector on the calibration split.
    Calibrate,
    /// Run the detectors over normal and adversarial examples.
    Detect,
    /// Measure every checkpoint on the test set.
    Evaluate,
    /// Assemble tables and figure series from earlier stages.
    Report,
}

fn parse_arch(s: &str) -> Result<ArchName, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| "expected mnist_cnn, canonical_cnn or svhn_cnn".to_string())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, ConfigError> {
    let mut config = match (&cli.config, &cli.data) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(dir)) => {
            let seed = cli.seed.ok_or_else(|| ConfigError::Invalid {
                at: "seed".into(),
                message: "--seed is required without a config file".into(),
            })?;
            ExperimentConfig::from_data_dir(dir, seed)
        }
        (None, None) => {
            return Err(ConfigError::Invalid { at: "config".into(), message: "pass --config or --data".into() })
        }
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(arch) = cli.arch {
        config.arch = ArchChoice::Named(arch);
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(load_config(cli)?);
    log::info!("config sha256 {}", ctx.provenance.config_sha256);
    match cli.command {
        Command::Train => stages::train(&ctx),
        Command::AugmentCanonical => stages::augment_canonical(&ctx),
        Command::Sanitize => stages::sanitize(&ctx),
        Command::Attack => stages::attack(&ctx),
        Command::Calibrate => detection::calibrate(&ctx),
        Command::Detect => detection::detect(&ctx),
        Command::Evaluate => stages::evaluate(&ctx),
        Command::Report => report::report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
