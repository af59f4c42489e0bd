use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration; `path` is the dotted key path, empty for the root.
    Config { path: String, message: String },
    Divergence(String),
    Io(String),
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) | CliError::Run(_) => 1,
        }
    }

    /// `error[<kind>] <path>: <message>` on one line.
    pub fn line(&self) -> String {
        let one = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
        match self {
            CliError::Config { path, message } => {
                let path = if path.is_empty() { "<root>" } else { path };
                format!("error[config] {path}: {}", one(message))
            }
            CliError::Divergence(m) => format!("error[divergence] {}", one(m)),
            CliError::Io(m) => format!("error[io] {}", one(m)),
            CliError::Run(m) => format!("error[run] {}", one(m)),
        }
    }
}

impl From<ssn_core::Error> for CliError {
    fn from(e: ssn_core::Error) -> Self {
        match e {
            ssn_core::Error::NonFinite { .. } => CliError::Divergence(e.to_string()),
            ssn_core::Error::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "ssn", version, about = "Feature shifting networks: training, checks and analyses")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from a TOML config; writes a checkpoint, metrics and offset snapshots.
    Train(TrainArgs),
    /// Evaluation loss of a checkpoint on its recorded evaluation set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the configured dataset as JSON lines.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Train)]
        split: Split,
    },
    /// Finite-difference gradient suite over every building block.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter and FLOP totals of a named network.
    Count(CountArgs),
    /// Diagnostics over a trained checkpoint.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Tape FSM against the explicit-convolution oracle on random configurations.
    OracleCheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.iterations`.
    #[arg(long)]
    iterations: Option<u64>,
    /// Continue from a checkpoint instead of a fresh model.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum CountModel {
    ThreeBlock,
    Resnet50,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Convention {
    Mac,
    TwoOpMac,
}

#[derive(Args, Debug)]
struct CountArgs {
    #[arg(long, value_enum, default_value_t = CountModel::ThreeBlock)]
    model: CountModel,
    #[arg(long, default_value_t = 256)]
    height: usize,
    #[arg(long, default_value_t = 192)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    shift_channels: usize,
    #[arg(long, default_value_t = 17)]
    keypoints: usize,
    #[arg(long, value_enum, default_value_t = Convention::Mac)]
    convention: Convention,
    /// Also print a per-layer table.
    #[arg(long)]
    per_layer: bool,
}

#[derive(Subcommand, Debug)]
enum Analyze {
    /// Offset table of every FSM plus window energies of one module.
    Offsets(AnalyzeArgs),
    /// Effective receptive field of one non-local map position.
    Erf(AnalyzeArgs),
    /// Keypoint-to-shifting-channel scores and contribution counts.
    KpScores(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config whose `[analysis]` table supplies defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    module: Option<String>,
    #[arg(long)]
    channel: Option<usize>,
    #[arg(long)]
    x: Option<usize>,
    #[arg(long)]
    y: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    samples: Option<usize>,
    /// `max` or `sum`.
    #[arg(long)]
    normalization: Option<String>,
    /// Average signed gradients instead of magnitudes.
    #[arg(long)]
    signed: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a.config, a.out.as_deref(), a.iterations, a.resume.as_deref()),
        Command::Eval { checkpoint } => commands::eval(&checkpoint),
        Command::Synth { config, out, split } => commands::synth(&config, out.as_deref(), split == Split::Eval),
        Command::Gradcheck { cases, seed } => commands::gradcheck(cases, seed),
        Command::Count(a) => commands::count(&a),
        Command::Analyze { what } => commands::analyze(what),
        Command::OracleCheck { configs, seed } => commands::oracle_check(configs, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code())
        }
    }
}
