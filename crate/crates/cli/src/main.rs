//! `featdenoise` command-line front end.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use featdenoise::backbone::{Arch, Variant};

use crate::config::LoadedConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "featdenoise", version, about = "Denoising on frozen contrastive-pretrained ResNet features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the decoder on a dataset.
    Train(RunArgs),
    /// Denoise images with a checkpoint.
    Denoise(RunArgs),
    /// Clean/noisy feature similarity and content separation.
    Analyze(RunArgs),
    /// PSNR/SSIM of a checkpoint on datasets under noise specs.
    Benchmark(RunArgs),
    /// Write randomly initialized encoder weights.
    InitWeights {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        max_level: usize,
        /// Stem width of a custom encoder.
        #[arg(long, requires = "layers")]
        width: Option<usize>,
        /// Blocks per stage of a custom encoder, e.g. `1,1,1,1`.
        #[arg(long, requires = "width", value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: featdenoise::Error| e.to_string())
}

fn load(args: &RunArgs) -> Result<LoadedConfig, CliError> {
    let mut cfg = LoadedConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.config.seed = seed;
        if let Some(t) = &mut cfg.config.train {
            t.seed = seed;
        }
    }
    if let Some(out) = &args.out {
        // Flag paths are relative to the working directory.
        cfg.config.out = Some(std::path::absolute(out).unwrap_or_else(|_| out.clone()));
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(&load(&a)?),
        Command::Denoise(a) => commands::denoise(&load(&a)?),
        Command::Analyze(a) => commands::analyze(&load(&a)?),
        Command::Benchmark(a) => commands::benchmark(&load(&a)?),
        Command::InitWeights {
            variant,
            out,
            seed,
            max_level,
            width,
            layers,
        } => {
            let arch = match (width, layers) {
                (Some(width), Some(l)) => {
                    let layers: [usize; 4] = l.try_into().map_err(|l: Vec<usize>| {
                        CliError::Validation(format!("`--layers`: expected 4 stage depths, got {}", l.len()))
                    })?;
                    Some(Arch { width, layers })
                }
                _ => None,
            };
            commands::init_weights(variant, arch, max_level, seed, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
