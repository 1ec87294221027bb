//! `gamem`: fit multiple GAMs from CSV, predict and sample from saved fits,
//! and run the simulation study.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical failure. Every flag
//! marked with an environment variable can also be set as `GAMEM_<NAME>`.

mod archive;
mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gamem::families::Family;

use commands::EmOverrides;

#[derive(Parser)]
#[command(
    name = "gamem",
    version,
    about = "Multiple GAMs with smoothing parameters chosen by approximate EM"
)]
struct Cli {
    /// Worker threads; 1 runs every stage serially
    #[arg(long, global = true, env = "GAMEM_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model from a TOML config and a CSV file, writing a JSON archive
    Fit(FitCmd),
    /// Predict every parameter with pointwise bands from an archive
    Predict(PredictCmd),
    /// Draw responses from a fitted model at the rows of a CSV file
    Sample(SampleCmd),
    /// Run the simulation study and write a CSV report
    Simulate(SimulateCmd),
}

#[derive(Args)]
struct EmFlags {
    /// Convergence tolerance on |lambda * dl_M/dlambda|
    #[arg(long, env = "GAMEM_TOL")]
    tol: Option<f64>,
    /// Maximum outer iterations
    #[arg(long, env = "GAMEM_MAX_OUTER")]
    max_outer: Option<usize>,
}

impl EmFlags {
    fn overrides(&self) -> EmOverrides {
        EmOverrides {
            tol: self.tol,
            max_outer: self.max_outer,
        }
    }
}

#[derive(Args)]
struct FitCmd {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Archive to write
    #[arg(long, short)]
    out: PathBuf,
    #[command(flatten)]
    em: EmFlags,
}

#[derive(Args)]
struct PredictCmd {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV (stdout when absent)
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Coverage of the pointwise bands
    #[arg(long, default_value_t = 0.95, env = "GAMEM_LEVEL")]
    level: f64,
    /// GEV quantile probabilities, comma separated
    #[arg(long, value_delimiter = ',', env = "GAMEM_QUANTILES")]
    quantiles: Vec<f64>,
    /// Add lower and upper columns to each quantile, from posterior draws
    #[arg(long)]
    quantile_bands: bool,
    /// Posterior draws for quantile bands
    #[arg(long, default_value_t = gamem::inference::DEFAULT_DRAWS)]
    draws: usize,
    #[arg(long, env = "GAMEM_SEED")]
    seed: Option<u64>,
    /// Refuse the archive unless it was fitted with this model config
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SampleCmd {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, visible_alias = "R", default_value_t = 100)]
    replicates: usize,
    #[arg(long, env = "GAMEM_SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct SimulateCmd {
    /// gaussian, poisson, exponential, gamma, binomial or gev
    #[arg(long)]
    model: Family,
    #[arg(long)]
    n: usize,
    #[arg(long, visible_alias = "R", default_value_t = 1)]
    replicates: usize,
    #[arg(long, env = "GAMEM_SEED")]
    seed: Option<u64>,
    /// Basis dimension of every smooth
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Fill the seconds column with wall-clock fit times
    #[arg(long)]
    timing: bool,
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    em: EmFlags,
}

fn run(cli: Cli) -> error::Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Fit(c) => commands::fit(&commands::FitArgs {
            config: c.config,
            data: c.data,
            out: c.out,
            em: c.em.overrides(),
            threads,
        }),
        Command::Predict(c) => commands::predict(&commands::PredictArgs {
            archive: c.archive,
            data: c.data,
            out: c.out,
            level: c.level,
            quantiles: c.quantiles,
            quantile_bands: c.quantile_bands,
            draws: c.draws,
            seed: c.seed,
            config: c.config,
            threads,
        }),
        Command::Sample(c) => commands::sample(&commands::SampleArgs {
            archive: c.archive,
            data: c.data,
            out: c.out,
            replicates: c.replicates,
            seed: c.seed,
            threads,
        }),
        Command::Simulate(c) => commands::simulate(&commands::SimulateArgs {
            model: c.model,
            n: c.n,
            replicates: c.replicates,
            seed: c.seed,
            k: c.k,
            timing: c.timing,
            out: c.out,
            em: c.em.overrides(),
            threads,
        }),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) | Err(error::CliError::ClosedOutput) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
