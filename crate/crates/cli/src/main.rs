//! `totokit` command-line runner.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 for
//! numeric failures such as a diverged training run.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "totokit", version, about = "Patch-based probabilistic time-series forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    GenerateData(GenerateArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainArgs),
    /// Sample forecasts past the end of every series.
    Forecast(ForecastArgs),
    /// Score forecasts against the seasonal-naive reference.
    Evaluate(EvaluateArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Attention multiply-accumulate counts for both attention layouts.
    Flops(FlopsArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the file seed and TOTOKIT_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// The `[synth]` section as configured.
    Config,
    /// Daily sinusoid on a trend.
    SineTrend,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "config")]
    preset: Preset,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    None,
    NoVariateAttention,
    NoRobustLoss,
    NoSmm,
    NoCausalScaling,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    ablation: Ablation,
    /// Rescales the schedule to this many steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct ForecastArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory, base path, or either checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    horizon: usize,
    #[arg(long)]
    samples: Option<usize>,
    /// Comma-separated levels; defaults to the `[eval]` levels.
    #[arg(long, value_delimiter = ',')]
    quantiles: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate a trained model alongside the seasonal-naive reference.
    #[arg(long, conflicts_with = "forecasts")]
    checkpoint: Option<PathBuf>,
    /// Evaluate a precomputed forecast table alongside the reference.
    #[arg(long)]
    forecasts: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Coordinates probed per parameter; all of them when omitted.
    #[arg(long)]
    probes: Option<usize>,
}

#[derive(Args)]
struct FlopsArgs {
    /// Variates.
    #[arg(long)]
    m: usize,
    /// Patches.
    #[arg(long)]
    t: usize,
    /// Embedding width.
    #[arg(long)]
    d: usize,
    /// Time-wise blocks; one variate-wise block is added.
    #[arg(long)]
    n: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData(a) => commands::generate_data(a.common.config.as_deref(), a.common.seed, &a.out, matches!(a.preset, Preset::SineTrend)),
        Command::Train(a) => commands::train(a.common.config.as_deref(), a.common.seed, &a.data, &a.out, a.ablation, a.steps),
        Command::Forecast(a) => commands::forecast(
            a.common.config.as_deref(),
            a.common.seed,
            commands::ForecastRequest {
                checkpoint: &a.checkpoint,
                data: &a.data,
                horizon: a.horizon,
                samples: a.samples,
                quantiles: a.quantiles,
                out: &a.out,
            },
        ),
        Command::Evaluate(a) => commands::evaluate(
            a.common.config.as_deref(),
            a.common.seed,
            &a.data,
            a.checkpoint.as_deref(),
            a.forecasts.as_deref(),
            &a.out,
        ),
        Command::Gradcheck(a) => commands::gradcheck(a.common.config.as_deref(), a.common.seed, a.probes),
        Command::Flops(a) => commands::flops(a.m, a.t, a.d, a.n),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_data_is_a_usage_error() {
        let err = Cli::try_parse_from(["totokit", "train", "--out", "x"]).err().unwrap();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn ablation_names() {
        for name in ["none", "no-variate-attention", "no-robust-loss", "no-smm", "no-causal-scaling"] {
            let cli = Cli::try_parse_from(["totokit", "train", "--data", "d", "--out", "o", "--ablation", name]);
            assert!(cli.is_ok(), "{name}");
        }
        assert!(Cli::try_parse_from(["totokit", "train", "--data", "d", "--out", "o", "--ablation", "no-x"]).is_err());
    }

    #[test]
    fn evaluate_sources_are_exclusive() {
        let args = ["totokit", "evaluate", "--data", "d", "--out", "o", "--checkpoint", "c", "--forecasts", "f"];
        assert!(Cli::try_parse_from(args).is_err());
    }

    #[test]
    fn quantiles_split_on_commas() {
        let cli = Cli::try_parse_from([
            "totokit", "forecast", "--checkpoint", "c", "--data", "d", "--horizon", "3", "--quantiles", "0.1,0.5", "--out", "o",
        ])
        .unwrap();
        match cli.command {
            Command::Forecast(a) => assert_eq!(a.quantiles, Some(vec![0.1, 0.5])),
            _ => unreachable!(),
        }
    }
}
