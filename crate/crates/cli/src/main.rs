mod commands;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Multiobject tracking with particle belief propagation and its neural
/// enhancement.
#[derive(Debug, Parser, Serialize)]
#[command(name = "nebp", version)]
pub struct Cli {
    /// Worker threads for scene-level parallelism (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Generate persistent-clutter scenes.
    Simulate(SimulateArgs),
    /// Run a tracker over scenes and write estimate CSVs.
    Track(TrackArgs),
    /// Train the enhancement networks.
    Train(TrainArgs),
    /// Grid-search the rejection temperature and bias.
    Calibrate(CalibrateArgs),
    /// Score estimate CSVs against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Seed of the scenario family (shared clutter descriptors).
    #[arg(long, default_value_t = 1)]
    pub family_seed: u64,
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    /// Base seed for scene generation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames per scene (default: the family's length).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Scenario configuration JSON; overrides the family.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DataArgs {
    /// Scene JSON file or a directory of them.
    #[arg(long)]
    pub data: PathBuf,
    /// Model parameter JSON (default: `params.json` next to the scenes).
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Particles per object, overriding the parameter file.
    #[arg(long)]
    pub particles: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrackArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "bp")]
    pub method: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    /// Entry of the calibration file to use.
    #[arg(long, default_value = "default")]
    pub class: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Training configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "nebp")]
    pub method: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "default")]
    pub class: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Scene JSON file or a directory of them.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by `track`.
    #[arg(long)]
    pub estimates: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failures split by who has to act: the caller (bad input) or the run.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn report(&self) -> String {
        let (kind, e) = match self {
            Failure::Config(e) => ("config", e),
            Failure::Runtime(e) => ("runtime", e),
        };
        serde_json::json!({
            "error": {
                "kind": kind,
                "message": format!("{e:#}"),
            }
        })
        .to_string()
    }
}

impl From<nebp_core::Error> for Failure {
    fn from(e: nebp_core::Error) -> Self {
        use nebp_core::Error as E;
        match e {
            E::InvalidParams { .. } | E::InvalidScenario(_) | E::Checkpoint(_) | E::Json(_) => {
                Failure::Config(e.into())
            }
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", Failure::Config(anyhow::anyhow!(e.to_string())).report());
            return ExitCode::from(2);
        }
    };
    let run = || commands::run(&cli);
    let result = match cli.jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(Failure::Config(e.into())),
        },
        None => run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.report());
            ExitCode::from(f.code())
        }
    }
}
