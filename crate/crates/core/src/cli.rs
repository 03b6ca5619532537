//! Command-line front end: `generate`, `train`, `evaluate` and `report`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_SOLVER: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "colnode", version, about = "Train neural ODEs by collocation, sequentially, or with ADMM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `-s net.hidden=8`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the system and write clean and noisy train/test CSVs.
    Generate(ConfigArgs),
    /// Train a model and write a run directory.
    Train(ConfigArgs),
    /// Roll a checkpoint out over a dataset and report its MSE.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the summary here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Merge run summaries into a comparison table plus series files.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text)?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Parse { .. }
        | Error::InvalidArgument(_)
        | Error::InvalidInterval { .. }
        | Error::DimensionMismatch { .. }
        | Error::DegenerateGrid(_) => EXIT_USAGE,
        Error::IntegrationDiverged { .. } | Error::InconsistentJacobian { .. } | Error::Solver(_) => EXIT_SOLVER,
    }
}

/// Runs a parsed command. `Ok(false)` means the trainer failed; its outputs
/// were still written.
pub fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = resolve(&args)?;
            let data = experiment::generate_data(&cfg)?;
            data.save(&cfg.output_dir)?;
            let path = cfg.output_dir.join("config.txt");
            std::fs::write(&path, cfg.to_text()).map_err(|e| Error::io(&path, e))?;
            println!("wrote data to {}", cfg.output_dir.display());
            Ok(true)
        }
        Command::Train(args) => {
            let cfg = resolve(&args)?;
            let (train, test) = experiment::load_or_generate(&cfg)?;
            let out = experiment::run_training(&cfg, &train)?;
            let summary = experiment::summarize(&cfg, &out, test.as_ref());
            experiment::write_run(&cfg.output_dir, &cfg, &out, &summary)?;
            print!("{}", summary.to_text());
            if out.failed {
                eprintln!("error: trainer failed with status {}", out.status);
            }
            Ok(!out.failed)
        }
        Command::Evaluate { checkpoint, data, out } => {
            let m = experiment::evaluate_checkpoint(&checkpoint, &data)?;
            if let Some(path) = out {
                std::fs::write(&path, m.to_text()).map_err(|e| Error::io(&path, e))?;
            }
            print!("{}", m.to_text());
            Ok(true)
        }
        Command::Report { runs, out } => {
            let n = experiment::report(&runs, &out)?;
            println!("{n} run(s) written to {}", out.join("comparison.csv").display());
            Ok(true)
        }
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_SOLVER),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
