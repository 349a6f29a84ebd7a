//! `damage-seq`: generate corpora, train, tune, audit and compare models.
//!
//! Exit status is 0 on success, 1 on bad input and 2 on numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use config::ExperimentConfig;

pub const OUT_ENV: &str = "DAMAGE_SEQ_OUT";

#[derive(Debug, Parser)]
#[command(name = "damage-seq", version, about = "Sequence surrogates for ductile damage")]
pub struct Cli {
    /// Output root holding dataset/, models/, studies/ and audits/.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,

    /// JSON experiment file; flags take precedence over its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a bilinear-path corpus and write it as CSV.
    Generate(GenerateArgs),
    /// Train one model and write its checkpoint and history.
    Train(TrainArgs),
    /// Run a hyperparameter study for one architecture.
    Tune(TuneArgs),
    /// Audit a checkpoint for prefix consistency.
    Audit(AuditArgs),
    /// Tabulate the best trial of several studies.
    Compare(CompareArgs),
    /// Train every architecture/mode briefly and audit each.
    Matrix(MatrixArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub paths: Option<u64>,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// File name under dataset/.
    #[arg(long, default_value = "synthetic.csv")]
    pub name: String,
}

/// Where the paths come from when no config section says otherwise.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// gru, cnn or transformer.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long, value_parser = json_enum::<damage_seq::models::DecoderInit>)]
    pub decoder_init: Option<damage_seq::models::DecoderInit>,
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long, value_parser = json_enum::<damage_seq::models::Padding>)]
    pub padding: Option<damage_seq::models::Padding>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_parser = json_enum::<damage_seq::models::MaskMode>)]
    pub mask: Option<damage_seq::models::MaskMode>,
    #[arg(long, value_parser = json_enum::<damage_seq::models::PositionalEncoding>)]
    pub positional: Option<damage_seq::models::PositionalEncoding>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint name under models/; defaults to the model label.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// gru, cnn or transformer.
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Sample uniformly instead of using the surrogate.
    #[arg(long)]
    pub random: bool,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated truncation fractions.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    /// Audit the first N paths by id.
    #[arg(long, conflicts_with = "ids")]
    pub paths: Option<usize>,
    /// Audit these path ids.
    #[arg(long, value_delimiter = ',')]
    pub ids: Option<Vec<u64>>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Report name under audits/; defaults to the checkpoint stem.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Study JSON files.
    #[arg(required = true)]
    pub studies: Vec<PathBuf>,
    #[arg(long, default_value = "comparison.csv")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses a snake_case enum name through its serde representation.
fn json_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let experiment = match cli.config.as_deref().map(ExperimentConfig::load).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match commands::run(cli, experiment) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
