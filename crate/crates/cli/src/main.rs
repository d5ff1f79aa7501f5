//! `obfnet` command-line tool: data preparation, training, evaluation, the
//! coordinator service and a participant client.

mod commands;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use obfnet::models::ObfNetVariant;
use obfnet::nn::TrainConfig;
use obfnet::training::parse_config;

#[derive(Debug, Parser)]
#[command(name = "obfnet", version, about = "Obfuscation networks for private inference on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate an IDX image/label pair and store it under the canonical names.
    PrepareData {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `train` when the image file name starts with "train".
        #[arg(long, value_parser = parse_split)]
        split: Option<obfnet::dataset::Split>,
    },
    /// Train the LeNet backbone and write model, accuracy and loss curve.
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
        /// Seed for weight init and minibatch order.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train K obfuscators through the frozen backbone and write a bundle.
    TrainObfnets {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: ObfNetVariant,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
        k: u32,
        /// Instance `x` is trained with seed `base-seed + x`.
        #[arg(long, default_value_t = 100)]
        base_seed: u64,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of the backbone on raw and obfuscated test data (TSV).
    Evaluate {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        /// Directory holding the test IDX files.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample grids (PGM) for raw and obfuscated digits, and accuracy bar data.
    Figures {
        #[arg(long)]
        backbone: PathBuf,
        /// One or more bundles; the first net of each is rendered.
        #[arg(long, required = true, num_args = 1..)]
        bundle: Vec<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u32).range(1..))]
        count: u32,
        #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
        cols: u32,
    },
    /// Run the coordinator: inference endpoint and optional bundle endpoint.
    Serve {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long, requires = "bundle")]
        bundle_bind: Option<String>,
        /// Keep every received payload.
        #[arg(long)]
        curious: bool,
        /// Append received payloads to this file (implies --curious).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Act as a participant over the first N test samples; prints served accuracy.
    Submit {
        #[arg(long)]
        endpoint: String,
        #[arg(long, required_unless_present = "bundle_endpoint", conflicts_with = "bundle_endpoint")]
        bundle: Option<PathBuf>,
        /// Download the bundle from a coordinator instead of a file.
        #[arg(long)]
        bundle_endpoint: Option<String>,
        /// Probability of obfuscating each sample.
        #[arg(long, value_parser = parse_probability)]
        p: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Re-identification rates, zero fractions and many-to-one witnesses (TSV).
    AttackReport {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u32).range(1..))]
        n: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Backbone accuracy under per-pixel Laplace noise (TSV).
    BaselineSweep {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0.000001,0.05,0.1,0.2,0.5,1,2")]
        scales: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Optimizer settings. Flags override the config file, which overrides the
/// built-in defaults.
#[derive(Debug, Clone, Default, Args)]
struct TrainArgs {
    /// `key = value` lines: learning_rate, momentum, batch_size, epochs, seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "lr")]
    learning_rate: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainArgs {
    fn resolve(&self, defaults: TrainConfig, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
                parse_config(&text, defaults).map_err(|e| UsageError(format!("config {}: {e}", path.display())))?
            }
            None => defaults,
        };
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.momentum {
            cfg.momentum = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = seed {
            cfg.seed = v;
        }
        cfg.validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(cfg)
    }
}

/// Invalid input detected after argument parsing; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn parse_variant(s: &str) -> Result<ObfNetVariant, String> {
    s.parse().map_err(|e: obfnet::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<obfnet::dataset::Split, String> {
    match s {
        "train" => Ok(obfnet::dataset::Split::Train),
        "test" => Ok(obfnet::dataset::Split::Test),
        _ => Err(format!("expected train or test, got {s:?}")),
    }
}

fn parse_probability(s: &str) -> Result<f64, String> {
    let p: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&p) {
        Ok(p)
    } else {
        Err(format!("{p} is not in [0, 1]"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
