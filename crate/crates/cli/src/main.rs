//! `photocal`: simulation, calibration and tomography pipelines for
//! photon-counting detectors.

mod calibrate;
mod config;
mod error;
mod manifest;
mod report;
mod simulate;
mod tomography;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::{CliError, Result};
use manifest::Run;
use tomography::Convergence;

#[derive(Parser)]
#[command(name = "photocal", version, about = "Photon-counting detector calibration pipelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic count data.
    Simulate {
        kind: SimulateKind,
        #[command(flatten)]
        common: Common,
    },
    /// Estimate detection efficiency from count data.
    Calibrate {
        kind: CalibrateKind,
        #[command(flatten)]
        common: Common,
        /// Count data (CSV or JSON).
        #[arg(long)]
        data: PathBuf,
    },
    /// Reconstruct the detector POVM.
    Tomography {
        kind: TomographyKind,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Aggregate run manifests into a table and a CSV.
    Report {
        kind: ReportKind,
        /// Manifest to include; repeat for several runs.
        #[arg(long = "manifest", required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Cap on worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimulateKind {
    Klyshko,
    Pnrd,
    Coherent,
    Twinbeam,
}

#[derive(Clone, Copy, ValueEnum)]
enum CalibrateKind {
    Klyshko,
    Pnrd,
}

#[derive(Clone, Copy, ValueEnum)]
enum TomographyKind {
    Coherent,
    Twinbeam,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Summary,
}

fn kind_name(kind: impl ValueEnum) -> String {
    kind.to_possible_value().expect("no skipped variants").get_name().to_string()
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { kind, common } => {
            set_threads(common.threads)?;
            let config = config::load(&common.config)?;
            let mut run = Run::start("simulate", kind_name(kind), Some(common.seed), Some(config.clone()), &common.out)?;
            match kind {
                SimulateKind::Klyshko => simulate::klyshko(&config, common.seed, &mut run)?,
                SimulateKind::Pnrd => simulate::pnrd(&config, common.seed, &mut run)?,
                SimulateKind::Coherent => simulate::coherent(&config, common.seed, &mut run)?,
                SimulateKind::Twinbeam => simulate::twin_beam(&config, common.seed, &mut run)?,
            }
            run.finish()?;
        }
        Command::Calibrate { kind, common, data } => {
            set_threads(common.threads)?;
            let config = config::load(&common.config)?;
            let mut run = Run::start("calibrate", kind_name(kind), None, Some(config.clone()), &common.out)?;
            match kind {
                CalibrateKind::Klyshko => calibrate::klyshko(&config, Some(&data), &mut run)?,
                CalibrateKind::Pnrd => calibrate::pnrd(&config, Some(&data), &mut run)?,
            }
            run.finish()?;
        }
        Command::Tomography { kind, common, data } => {
            set_threads(common.threads)?;
            let config = config::load(&common.config)?;
            let mut run = Run::start("tomography", kind_name(kind), None, Some(config.clone()), &common.out)?;
            let convergence = match kind {
                TomographyKind::Coherent => tomography::coherent(&config, Some(&data), &mut run)?,
                TomographyKind::Twinbeam => tomography::twin_beam(&config, Some(&data), &mut run)?,
            };
            run.result("converged", matches!(convergence, Convergence::Converged));
            run.finish()?;
            if let Convergence::Failed(msg) = convergence {
                return Err(CliError::Convergence(msg));
            }
        }
        Command::Report { kind, manifests, out, threads } => {
            set_threads(threads)?;
            let mut run = Run::start("report", kind_name(kind), None, None, &out)?;
            match kind {
                ReportKind::Summary => report::summary(&manifests, &mut run)?,
            }
            run.finish()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PHOTOCAL_LOG", "warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("photocal: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
