use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geoconfound::commands::{self, Globals};

#[derive(Parser)]
#[command(name = "geoconfound", version, about = "Spatial-confounding adjustments for geostatistical regression")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed`.
    #[arg(long, global = true, env = "GEOCONFOUND_SEED")]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "GEOCONFOUND_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate confounded replicates and fit every model to each.
    Simulate,
    /// Fit the configured models to a dataset.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// WAIC of Spatial+ 2.0 across numbers of kept eigenvectors.
    SweepK {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Posterior-median raster from a fit artifact.
    Predict {
        #[arg(long)]
        fit: PathBuf,
    },
    /// Print a summary table from `study_raw.csv` or `fits.csv`.
    Report {
        #[arg(long)]
        input: Option<PathBuf>,
        /// True covariate effect for coverage (default: config or 3).
        #[arg(long)]
        beta_true: Option<f64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let g = Globals { config: cli.config, out: cli.out, seed: cli.seed, threads: cli.threads };
    let result = match &cli.command {
        Command::Simulate => commands::simulate(&g).map(|_| ()),
        Command::Fit { data } => commands::fit(&g, data.as_deref()).map(|_| ()),
        Command::SweepK { data } => commands::sweep_k(&g, data.as_deref()).map(|_| ()),
        Command::Predict { fit } => commands::predict(&g, fit).map(|_| ()),
        Command::Report { input, beta_true } => commands::report(&g, input.as_deref(), *beta_true).map(|t| print!("{t}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
