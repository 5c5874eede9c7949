//! `subln`: gain tables, bound evaluation, sweeps, gradient checks and toy
//! training runs.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use subln_core::init::InitMode;
use subln_core::lab::{LossKind, Reduction, Task};
use subln_core::{Family, NormVariant};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "subln", version, about = "Sub-LN transformer experiments")]
struct Cli {
    /// Flat JSON config; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the derived initialization gains for an architecture.
    Gamma(GammaArgs),
    /// Evaluate model-update bounds as CSV.
    Bounds(BoundsArgs),
    /// Measure one-step model updates across depths.
    SweepDepth(SweepDepthArgs),
    /// Train across a learning-rate grid and record divergence.
    SweepLr(SweepLrArgs),
    /// Compare tape gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train one toy model; writes a loss curve and a checkpoint.
    TrainToy(TrainToyArgs),
}

#[derive(Args, Debug, Serialize)]
struct Shared {
    /// Base seed (falls back to $SUBLN_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent trials.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct GammaArgs {
    #[arg(long)]
    family: Option<Family>,
    /// Encoder layers.
    #[arg(long)]
    n: Option<usize>,
    /// Decoder layers.
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct BoundsArgs {
    #[arg(long)]
    variant: Option<NormVariant>,
    /// Sub-layer counts, comma separated.
    #[arg(long = "L", value_delimiter = ',')]
    #[serde(rename = "L")]
    l: Option<Vec<usize>>,
    /// `auto` (derived gain), `unit`, or a number.
    #[arg(long)]
    gamma: Option<String>,
    /// `encoder-decoder` with --n/--m evaluates the encoder-decoder bound.
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
}

#[derive(Args, Debug, Serialize)]
struct SweepDepthArgs {
    #[arg(long = "L", value_delimiter = ',')]
    #[serde(rename = "L")]
    l: Option<Vec<usize>>,
    /// `variant:init` pairs, comma separated.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    n_seeds: Option<usize>,
    #[arg(long)]
    loss: Option<LossKind>,
    /// Also write an SVG plot.
    #[arg(long)]
    svg: Option<bool>,
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
}

#[derive(Args, Debug, Serialize)]
struct SweepLrArgs {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    eta_grid: Option<Vec<f64>>,
    #[arg(long)]
    steps: Option<usize>,
    /// Layers per stack.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    reduction: Option<Reduction>,
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    #[arg(long)]
    family: Option<Family>,
    #[arg(long)]
    variant: Option<NormVariant>,
    #[arg(long)]
    init: Option<InitMode>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    /// Sequence length of the random probe.
    #[arg(long)]
    positions: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
}

#[derive(Args, Debug, Serialize)]
struct TrainToyArgs {
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    variant: Option<NormVariant>,
    #[arg(long)]
    init: Option<InitMode>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    reduction: Option<Reduction>,
    #[command(flatten)]
    #[serde(flatten)]
    shared: Shared,
}

/// How an otherwise successful run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    /// The experiment ran but diverged or failed its check.
    Diverged,
}

fn run(cli: Cli) -> anyhow::Result<Outcome> {
    let (name, flags) = match &cli.command {
        Command::Gamma(a) => ("gamma", serde_json::to_value(a)?),
        Command::Bounds(a) => ("bounds", serde_json::to_value(a)?),
        Command::SweepDepth(a) => ("sweep-depth", serde_json::to_value(a)?),
        Command::SweepLr(a) => ("sweep-lr", serde_json::to_value(a)?),
        Command::Gradcheck(a) => ("gradcheck", serde_json::to_value(a)?),
        Command::TrainToy(a) => ("train-toy", serde_json::to_value(a)?),
    };
    let config = RunConfig::load(name, cli.config.as_deref(), flags)?;
    match cli.command {
        Command::Gamma(_) => commands::gamma(&config),
        Command::Bounds(_) => commands::bounds(&config),
        Command::SweepDepth(_) => commands::sweep_depth(&config),
        Command::SweepLr(_) => commands::sweep_lr(&config),
        Command::Gradcheck(_) => commands::gradcheck(&config),
        Command::TrainToy(_) => commands::train_toy(&config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
