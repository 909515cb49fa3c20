// SPDX-License-Identifier: MIT OR Apache-2.0

//! `headprobe`: fit per-head probes, trace concepts token by token, steer.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use headprobe::Error;

#[derive(Parser, Debug)]
#[command(
    name = "headprobe",
    version,
    about = "Linear probes and steering on attention-head activations"
)]
struct Cli {
    /// Worker threads for per-head fits and sweep cells.
    #[arg(long, global = true, env = "HEADPROBE_JOBS")]
    jobs: Option<usize>,

    /// TOML file with defaults; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the planted toy model, a synthetic activation dump and prompts.
    Demo(DemoArgs),
    /// Fit one probe per head and write the bank plus report files.
    Fit(FitArgs),
    /// Cross-validated top-K ensemble curve.
    Ensemble(EnsembleArgs),
    /// Apply frozen probes to a second dump.
    Transfer(TransferArgs),
    /// Generate and score every token with frozen probes.
    Trace(TraceArgs),
    /// Generate under a steering intervention.
    Steer(SteerArgs),
    /// Run the alpha x K steering grid.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Signal gain of the planted head in the dataset.
    #[arg(long, default_value_t = 1.0)]
    pub gain: f64,
    #[arg(long, default_value_t = 500)]
    pub n: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum TransformArg {
    None,
    Permute,
    Cubic,
    Sin10,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// APRB activation dump.
    #[arg(long)]
    pub dump: PathBuf,
    /// Label table (id, name, label) for dumps without labels.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub fold_seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = TransformArg::None)]
    pub transform: TransformArg,
    #[arg(long, default_value_t = 0)]
    pub permute_seed: u64,
    /// Also sweep the regularization grid.
    #[arg(long)]
    pub lambda_sweep: bool,
    /// Also run the label-transform robustness suite.
    #[arg(long)]
    pub robustness: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Paper,
    Nested,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// K values; defaults to 1,8,32,64,96,128,256,512 clipped to the model.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = ModeArg::Paper)]
    pub mode: ModeArg,
    /// Seed of the evaluation split.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub bank: PathBuf,
    #[arg(long)]
    pub dump: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub k: Option<usize>,
}

/// Options shared by the generating commands.
#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub bank: PathBuf,
    /// Lines of `issue<TAB>token ids`.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Ansi,
    Html,
    Csv,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long)]
    pub k: Option<usize>,
    /// Trace a single head, 1-based `layer,head`.
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long, value_enum, default_value_t = FormatArg::Html)]
    pub format: FormatArg,
    /// One display string per token id, one per line.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Scale colors to the largest absolute score instead of [-1, 1].
    #[arg(long)]
    pub autoscale: bool,
}

#[derive(Args, Debug)]
pub struct SteerArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long, allow_hyphen_values = true)]
    pub alpha: f64,
    #[arg(long)]
    pub k: Option<usize>,
    /// 1-based inclusive layer range `lo-hi`; default all layers.
    #[arg(long)]
    pub layers: Option<String>,
    /// Steer along the unit probe direction.
    #[arg(long)]
    pub normalize: bool,
    /// Choose the top K inside the layer range instead of filtering the global top K.
    #[arg(long)]
    pub reselect: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub gen: GenArgs,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub layers: Option<String>,
    #[arg(long)]
    pub normalize: bool,
    #[arg(long)]
    pub reselect: bool,
}

/// Values a `--config` file may supply.
#[derive(Debug, Default, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub jobs: Option<usize>,
    pub lambda: Option<f64>,
    pub fold_seed: Option<u64>,
    pub k: Option<usize>,
    pub steps: Option<usize>,
    pub temperature: Option<f64>,
    pub alphas: Option<Vec<f64>>,
    pub ks: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
}

fn load_config(path: Option<&PathBuf>) -> Result<FileConfig, Error> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("config {}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), Error> {
    let config = load_config(cli.config.as_ref())?;
    if let Some(jobs) = cli.jobs.or(config.jobs) {
        if jobs == 0 {
            return Err(Error::Validation("--jobs must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    }
    let jobs = rayon::current_num_threads();
    match cli.command {
        Command::Demo(a) => commands::demo(&a, jobs),
        Command::Fit(a) => commands::fit(&a, &config, jobs),
        Command::Ensemble(a) => commands::ensemble(&a, &config, jobs),
        Command::Transfer(a) => commands::transfer(&a, &config, jobs),
        Command::Trace(a) => commands::trace_cmd(&a, &config, jobs),
        Command::Steer(a) => commands::steer(&a, &config, jobs),
        Command::Sweep(a) => commands::sweep(&a, &config, jobs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code() as u8)
        }
    }
}
