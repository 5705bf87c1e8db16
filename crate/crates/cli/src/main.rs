//! `wdgtc`: graph-regularized CP tensor completion from the command line.

mod commands;
mod error;
mod manifest;
mod specs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "wdgtc", version, about = "Low-rank CP tensor completion with graph-smooth sparse factors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill the missing cells of a tensor file.
    Complete(CompleteArgs),
    /// Write a synthetic scenario bundle.
    Generate(GenerateArgs),
    /// Score a prediction against ground truth.
    Evaluate(EvaluateArgs),
    /// Pick coefficients by validation error.
    GridSearch(GridSearchArgs),
    /// Re-run the command recorded in a manifest and check its output digests.
    Replay(ReplayArgs),
}

/// Options shared by the commands that run the solver.
#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Initial CP rank.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub rank: u64,
    /// Graph as `adj.csv:W`, `poi:features.csv:W` or `khop:edges.csv:K:W`.
    #[arg(long = "graph", value_name = "SPEC", value_parser = specs::parse_graph_spec)]
    pub graphs: Vec<specs::GraphSpec>,
    /// Drop similarity-graph edges lighter than this.
    #[arg(long)]
    pub poi_threshold: Option<f64>,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero-based mode the graphs describe.
    #[arg(long, default_value_t = 0)]
    pub wdg_mode: usize,
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    /// Observed tensor; cells not listed are treated as missing.
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 0.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    /// Completed tensor.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out stem>.model.json`.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    /// Defaults to `<out stem>.trace.csv`.
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    /// Defaults to `<out stem>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Comma-separated mode sizes, e.g. `15,50,20`.
    #[arg(long, value_parser = commands::parse_dims)]
    pub dims: commands::Dims,
    #[arg(long)]
    pub clusters: usize,
    #[arg(long, default_value_t = 1)]
    pub rank_per_cluster: usize,
    /// Noise standard deviation.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Read `--noise` as a fraction of the signal RMS.
    #[arg(long)]
    pub noise_relative: bool,
    /// `random:RATE` or `tail:LAST_FROM:SECOND_FROM`.
    #[arg(long, default_value = "random:0.2", value_parser = commands::parse_missing)]
    pub missing: wdgtc::MissingPattern,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Seed of the missingness draw; defaults to `seed + 1000`.
    #[arg(long)]
    pub mask_seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
    /// Cells to score; defaults to the cells listed in the truth file.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Also report the relative residual of every slice along this mode.
    #[arg(long)]
    pub per_slice_mode: Option<usize>,
    /// Report as JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-slice table as CSV; defaults to `<out stem>.slices.csv`.
    #[arg(long)]
    pub per_slice_out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Exhaustive,
    PerBeta,
}

#[derive(Debug, Args)]
pub struct GridSearchArgs {
    /// Training tensor; cells not listed are treated as missing.
    #[arg(long)]
    pub input: PathBuf,
    /// Validation cells, disjoint from the training cells.
    #[arg(long)]
    pub val_mask: PathBuf,
    /// Ground truth covering every validation cell.
    #[arg(long)]
    pub truth: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// `name=start:stop:step` or `name=v1,v2,...` for alpha, beta, gamma, delta or graphN.
    #[arg(long = "grid", value_name = "SPEC", value_parser = specs::parse_grid_spec)]
    pub grids: Vec<specs::GridSpec>,
    #[arg(long, value_enum, default_value_t = StrategyArg::Exhaustive)]
    pub strategy: StrategyArg,
    /// Seed for the per-beta draw of the other coefficients.
    #[arg(long, default_value_t = 0)]
    pub strategy_seed: u64,
    /// Result table as CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to `<out stem>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse();
    match commands::run(cli.command, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
