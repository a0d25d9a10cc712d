mod commands;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, ValueEnum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Verb {
    GenData,
    Pretrain,
    Finetune,
    Evaluate,
    SampleBuffer,
    InspectCkpt,
}

/// Continual multi-modal self-supervised pre-training.
#[derive(Debug, Parser)]
#[command(name = "coss", version)]
struct Cli {
    /// What to run.
    #[arg(value_enum)]
    verb: Verb,
    /// Checkpoint for `inspect-ckpt` (same as --ckpt).
    path: Option<PathBuf>,
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `scheduler.seed=7`; repeatable.
    #[arg(long = "override", value_name = "K=V")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Master seed (sets scheduler.seed and finetune.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Pre-trained checkpoint (finetune, evaluate, sample-buffer).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Stream to sample from (sample-buffer).
    #[arg(long)]
    stream: Option<String>,
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(String),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

impl From<coss_core::Error> for Failure {
    fn from(e: coss_core::Error) -> Self {
        match e {
            coss_core::Error::Config(m) => Failure::Config(m),
            // The message already carries the underlying cause.
            other => Failure::Runtime(anyhow::anyhow!(other.to_string())),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("COSS_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| Failure::Config(format!("COSS_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(Failure::Config("COSS_THREADS must be ≥ 1".into()));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(e.into()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(1);
        }
    };
    let result = init_threads().and_then(|_| commands::dispatch(&cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("usage error: {m}"),
                Failure::Config(m) => eprintln!("config error: {m}"),
                Failure::Runtime(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
