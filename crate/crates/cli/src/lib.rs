//! The `emodarts` command line: data generation, feature extraction, search,
//! derivation, baselines, the scope study and genome export.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use emodarts_core::config::RunConfig;
use emodarts_core::Error;

mod commands;
pub mod manifest;

pub use manifest::Manifest;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_IO: i32 = 74;

/// Environment variable read when `--seed` is absent.
pub const SEED_ENV: &str = "EMODARTS_SEED";

#[derive(Debug, Parser)]
#[command(name = "emodarts", version, about = "Joint CNN and sequential architecture search for speech emotion recognition")]
pub struct Cli {
    /// Seed for every random choice; falls back to $EMODARTS_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Upper bound on fold-parallel workers.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic speaker-structured dataset.
    GenData(GenDataArgs),
    /// Turn a directory of WAV files into 128x128 MFCC maps.
    Features(FeaturesArgs),
    /// Search an architecture on one fold and write its genome.
    Search(SearchArgs),
    /// Train the network a genome describes and score it on the fold's test speakers.
    Derive(DeriveArgs),
    /// Train and score a hand-designed comparison model.
    Baseline(BaselineArgs),
    /// Run every SeqNN scope on every fold.
    Study(StudyArgs),
    /// Render a genome as three Graphviz files.
    ExportDot(ExportDotArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 10)]
    pub speakers: usize,
    #[arg(long, default_value_t = 10)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.1)]
    pub sigma: f64,
    /// `ROWSxCOLS`, or one number for square maps.
    #[arg(long, default_value = "32x32", value_parser = parse_dims)]
    pub dims: (usize, usize),
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub wav_dir: PathBuf,
    /// CSV with columns `path,class,speaker`; paths are relative to --wav-dir.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Dataset, config and fold selection shared by the training commands.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Sectioned key=value config; built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of speaker-independent folds.
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// A named SeqNN scope such as "RNN Only", or a comma-separated op list.
    #[arg(long)]
    pub scope: Option<String>,
    /// Overrides `search.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub retain_all_edges: bool,
    #[arg(long)]
    pub out_genome: PathBuf,
    #[arg(long)]
    pub out_history: PathBuf,
}

#[derive(Debug, Args)]
pub struct DeriveArgs {
    #[arg(long)]
    pub genome: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Overrides `derived.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out_metrics: PathBuf,
    #[arg(long)]
    pub out_history: Option<PathBuf>,
    #[arg(long)]
    pub out_model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// cnn, cnn_lstm or cnn_lstm_att.
    #[arg(long)]
    pub kind: String,
    #[command(flatten)]
    pub data: DataArgs,
    /// A single fold; every fold when absent.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out_metrics: PathBuf,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Semicolon-separated scope names; all five when absent.
    #[arg(long)]
    pub scopes: Option<String>,
    #[arg(long)]
    pub search_epochs: Option<usize>,
    #[arg(long)]
    pub derived_epochs: Option<usize>,
    #[arg(long)]
    pub out_results: PathBuf,
    #[arg(long)]
    pub out_scatter: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportDotArgs {
    #[arg(long)]
    pub genome: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the outputs here instead of over the recorded paths.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad dimension `{t}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((r, c)) => Ok((num(r)?, num(c)?)),
        None => num(s).map(|n| (n, n)),
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::NumericFault(_) => EXIT_NUMERIC,
        Error::Io(_) | Error::Ingestion(_) | Error::Parse { .. } => EXIT_IO,
        Error::Config(_) | Error::Protocol(_) | Error::Catalog(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// State a command runs with beyond its flags.
pub(crate) struct Invocation {
    pub argv: Vec<String>,
    pub seed: u64,
    pub jobs: usize,
    /// Config recorded in a manifest; replaces `--config` during replay.
    pub config: Option<RunConfig>,
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Messages go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let seed = match cli.seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(v) => match v.trim().parse() {
                Ok(s) => s,
                Err(_) => {
                    eprintln!("error: {SEED_ENV}=`{v}` is not an unsigned integer");
                    return EXIT_USAGE;
                }
            },
            Err(_) => 0,
        },
    };
    let mut argv: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    if cli.seed.is_none() {
        argv.extend(["--seed".to_string(), seed.to_string()]);
    }
    let inv = Invocation {
        argv,
        seed,
        jobs: cli.jobs.max(1),
        config: None,
    };
    report(commands::execute(cli.command, inv))
}

fn report(r: emodarts_core::Result<()>) -> i32 {
    match r {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
