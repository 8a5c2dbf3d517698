//! `pln`: simulate, fit and select Poisson log-normal models from CSV data.

mod commands;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "pln", version, about = "Poisson log-normal inference by importance-sampling EM")]
struct Cli {
    /// Worker threads (results do not depend on this value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw counts and latent vectors from a parameter file.
    Simulate(SimulateArgs),
    /// Fit the full or a composite likelihood.
    Fit(FitArgs),
    /// Build a block design covering every species pair.
    Blocks(BlocksArgs),
    /// Rank covariate subsets by composite-likelihood BIC.
    Select(SelectArgs),
    /// Run a replicated simulation study from a JSON config.
    Simstudy(SimstudyArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// Counts: header of species names, one row per site.
    #[arg(long)]
    pub counts: PathBuf,
    /// Covariates: header of covariate names, one row per site.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    /// Offsets with the same shape as the counts (zero when absent).
    #[arg(long)]
    pub offsets: Option<PathBuf>,
    /// Do not prepend an intercept column.
    #[arg(long)]
    pub no_intercept: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Full,
    Composite,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Growth {
    Linear,
    Constant,
}

#[derive(Args, Debug, Serialize)]
pub struct EmArgs {
    /// Weight of the conditional-moment component in the proposal mixture.
    #[arg(long, default_value_t = 0.9)]
    pub alpha: f64,
    /// Initial number of particles per site.
    #[arg(long, default_value_t = 200)]
    pub particles: usize,
    #[arg(long, value_enum, default_value_t = Growth::Linear)]
    pub growth: Growth,
    /// Particles for the final variance and likelihood pass (default: the
    /// count of the next iteration).
    #[arg(long)]
    pub final_particles: Option<usize>,
    #[arg(long, default_value_t = 300)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 50)]
    pub lag: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    /// Random seed; the PLN_SEED environment variable overrides it.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Outer loops of the variational warm start.
    #[arg(long, default_value_t = 50)]
    pub init_steps: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct DesignArgs {
    /// Block size for a greedy design.
    #[arg(long)]
    pub block_size: Option<usize>,
    /// Block design file, as written by `pln blocks`.
    #[arg(long, conflicts_with = "block_size")]
    pub blocks: Option<PathBuf>,
    /// Random restarts of the greedy design search.
    #[arg(long, default_value_t = 20)]
    pub restarts: usize,
}

#[derive(Args, Debug, Serialize)]
pub struct SimulateArgs {
    /// JSON parameter file with `b` (d rows, p columns) and `sigma`.
    #[arg(long)]
    pub params: PathBuf,
    /// Covariates CSV; when absent, `--n` sites get an intercept and
    /// standard normal columns.
    #[arg(long)]
    pub covariates: Option<PathBuf>,
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long, required_unless_present = "covariates")]
    pub n: Option<usize>,
    #[arg(long)]
    pub offsets: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Likelihood::Full)]
    pub likelihood: Likelihood,
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Confidence level of the reported intervals.
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct BlocksArgs {
    #[arg(long)]
    pub p: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub restarts: usize,
    /// Output file; the design is only summarized when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Semicolon-separated covariate subsets, each a comma-separated list of
    /// names; the intercept is always included.
    #[arg(long, conflicts_with = "all_subsets", required_unless_present = "all_subsets")]
    pub covariate_sets: Option<String>,
    #[arg(long)]
    pub all_subsets: bool,
    #[command(flatten)]
    pub design: DesignArgs,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SimstudyArgs {
    /// JSON study configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(error::EXIT_INPUT);
        }
    }
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Blocks(a) => commands::blocks(a),
        Command::Select(a) => commands::select(a),
        Command::Simstudy(a) => commands::simstudy(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
