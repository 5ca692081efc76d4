//! Command-line entry points: `gen-data`, `train`, `eval`, `infer` and
//! `export-obj`. [`run_command`] maps outcomes to exit codes: 0 success,
//! 1 usage error, 2 runtime failure.

mod commands;
mod files;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "ANIMER_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// A problem with the invocation itself (flags, config keys, stage order);
/// reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

macro_rules! usage {
    ($($arg:tt)*) => { anyhow::Error::new($crate::UsageError(format!($($arg)*))) };
}
pub(crate) use usage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "animer", version, about = "Animal mesh recovery: data generation, training, evaluation and inference")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic annotated dataset (manifest, shards, rasters).
    GenData(GenDataArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Predict body parameters for one dataset record.
    Infer(InferArgs),
    /// Write a mesh as Wavefront OBJ.
    ExportObj(ExportObjArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON generation config; omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config (TrainConfig keys plus an optional `network`
    /// object of overrides).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training dataset directories, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub data: Vec<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Continue from `--checkpoint` or, by default, `<out>/latest`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the seed of the training config (fresh runs only).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path (default `<checkpoint>.metrics.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the input record.
    #[arg(long)]
    pub data: PathBuf,
    /// Record id within the dataset.
    #[arg(long, default_value_t = 0)]
    pub record: usize,
    /// Also write the prediction as JSON to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct ExportObjArgs {
    /// Predict the mesh with this checkpoint (needs `--data` and
    /// `--record`).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory; without `--checkpoint` the record's ground-truth
    /// mesh is written.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub record: Option<usize>,
    /// Write the rest mesh of this taxon's template (the dataset's when
    /// `--data` is given, otherwise the toy preset).
    #[arg(long)]
    pub taxon: Option<String>,
    /// Output `.obj` path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Caps rayon's global pool from [`THREADS_ENV`]. The pool can only be
/// configured once per process; later calls keep the first setting.
fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| usage!("{THREADS_ENV} must be a positive integer, got {raw:?}"))?;
    if n == 0 {
        return Err(usage!("{THREADS_ENV} must be a positive integer, got 0"));
    }
    if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
        log::debug!("thread pool already configured; {THREADS_ENV}={n} ignored");
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::ExportObj(a) => commands::export_obj(&a),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let code = exit_code(&e);
            let kind = if code == EXIT_USAGE { "usage error" } else { "error" };
            eprintln!("animer: {kind}: {e:#}");
            code
        }
    }
}
