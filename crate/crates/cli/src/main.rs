// SPDX-License-Identifier: Apache-2.0

//! `mui-lab`: command-line front end of the model utilization toolkit.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mui-lab", version, about = "Model utilization analysis")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// INI file with [model], [train], [eval], [selection], [experiment], [mask], [diversity], [ablation] sections.
    #[arg(long, global = true, env = "MUI_LAB_CONFIG")]
    pub config: Option<PathBuf>,
    /// Overrides `[experiment] seeds` with a single seed.
    #[arg(long, global = true, env = "MUI_LAB_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "MUI_LAB_OUT", default_value = "mui-out")]
    pub out: PathBuf,
    /// proj | act | ig | sae
    #[arg(long, global = true, env = "MUI_LAB_SCORE_MODE")]
    pub score_mode: Option<String>,
    /// token | sum
    #[arg(long, global = true, env = "MUI_LAB_AGGREGATE")]
    pub aggregate: Option<String>,
    /// topk:K | permille:R | global:K | score:F
    #[arg(long, global = true, env = "MUI_LAB_POLICY")]
    pub policy: Option<String>,
    /// union | pooled
    #[arg(long, global = true, env = "MUI_LAB_SCOPE")]
    pub scope: Option<String>,
    /// SAE weights (.musa) for `--score-mode sae`.
    #[arg(long, global = true, env = "MUI_LAB_SAE")]
    pub sae: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a toy model on task suites and write traces, suites and the model snapshot.
    Trace(TraceArgs),
    /// Score a trace file and write per-sample key sets.
    Score(TraceInput),
    /// MUI per trace file, or the full toy pipeline when no trace is given.
    Mui(MuiArgs),
    /// Performance-utilization ratio of points or of a single (P, MUI) pair.
    Pur(PurArgs),
    /// Fit MUI = A ln P + B over per-model points, or extrapolate a given fit.
    Fit(FitArgs),
    /// Rank models per dataset by P and by PUR, optionally against reference ranks.
    Rank(RankArgs),
    /// Classify the optimization direction between two models or two points.
    Direction(DirectionArgs),
    /// Masking sweep on a toy model trained on at least two suites.
    Mask(ModelArg),
    /// MUI growth curves over sample count and capability mix.
    Diversity(ModelArg),
    /// MUI of correct against incorrect samples.
    Ablation(ModelArg),
    /// Recompute the bundled published PUR values and ranking correlations.
    Reproduce,
    /// Render `points.csv` in a directory as an SVG scatter with the fitted curve.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ModelArg {
    /// Toy model snapshot (.musm) instead of building one from the configuration.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Comma-separated suites: copy, reverse, sort, modadd, majority.
    #[arg(long)]
    pub suites: Option<String>,
    #[arg(long)]
    pub size: Option<usize>,
    /// raw | scored
    #[arg(long, default_value = "raw")]
    pub mode: String,
    /// Store block-output residuals (needed for SAE scoring).
    #[arg(long)]
    pub residuals: bool,
    /// free | forced
    #[arg(long)]
    pub decoding: Option<String>,
}

#[derive(Debug, Args)]
pub struct TraceInput {
    #[arg(long, required = true, num_args = 1..)]
    pub traces: Vec<PathBuf>,
    /// Attribution weights for projection and gradient scoring of RAW traces.
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MuiArgs {
    #[arg(long, num_args = 1..)]
    pub traces: Vec<PathBuf>,
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PurArgs {
    #[arg(long, conflicts_with_all = ["p", "mui"])]
    pub points: Option<PathBuf>,
    #[arg(long, requires = "mui")]
    pub p: Option<f64>,
    #[arg(long, requires = "p")]
    pub mui: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, conflicts_with_all = ["a", "b"])]
    pub points: Option<PathBuf>,
    #[arg(long, requires = "b", allow_hyphen_values = true)]
    pub a: Option<f64>,
    #[arg(long, requires = "a", allow_hyphen_values = true)]
    pub b: Option<f64>,
    /// Performance at which to extrapolate.
    #[arg(long, default_value_t = 100.0)]
    pub at: f64,
    /// Fit each dataset separately instead of one point per model (mean P and MUI over its datasets).
    #[arg(long, requires = "points")]
    pub per_dataset: bool,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub points: PathBuf,
    /// CSV with label, dataset, ref_rank columns.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct DirectionArgs {
    #[arg(long, requires_all = ["before", "after"])]
    pub points: Option<PathBuf>,
    /// Label of the earlier model in the points file.
    #[arg(long)]
    pub before: Option<String>,
    #[arg(long)]
    pub after: Option<String>,
    /// "P,MUI" of the earlier model.
    #[arg(long, conflicts_with = "points", requires = "to", allow_hyphen_values = true)]
    pub from: Option<String>,
    #[arg(long, conflicts_with = "points", requires = "from", allow_hyphen_values = true)]
    pub to: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    pub eps_p: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eps_mui: f64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directory holding points.csv; defaults to --out.
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
