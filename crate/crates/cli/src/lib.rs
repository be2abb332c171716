//! Command-line front end for model arithmetic: `generate`, `tune`, `sweep`
//! and `test`.
//!
//! Results go to stdout and diagnostics to stderr. Exit codes: 0 on success,
//! 1 when a test suite fails, 2 for user errors (bad config, formula, flags
//! or input files) and 3 when a model backend fails.

pub mod config;
mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use model_arith::formula::Normalization;
use model_arith::harness::Suite;

pub use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "model-arith", version, about = "Model arithmetic decoding")]
pub struct Cli {
    /// Engine config (JSON).
    #[arg(long, global = true, env = "MODEL_ARITH_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a continuation of a prompt.
    Generate(GenerateArgs),
    /// Calibrate and tune speculative factors.
    Tune(TuneArgs),
    /// Run a strength sweep.
    Sweep(SweepArgs),
    /// Run the bundled exactness and oracle suites.
    Test(TestArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub formula: String,
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<Normalization>,
    /// Use speculative sampling.
    #[arg(long)]
    pub speculative: bool,
    /// `auto` (tune on the prompt), `ones`, or a tuning report / JSON list.
    #[arg(long, requires = "speculative")]
    pub factors: Option<String>,
    /// Print the full result as JSON instead of the text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub formula: String,
    /// Calibration prompts, one per line.
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub samples: usize,
    /// Tokens generated per calibration sample.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub s_max: Option<usize>,
    #[arg(long)]
    pub mode: Option<Normalization>,
    /// Where to write the report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// JSON-lines report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[arg(long, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 200_000)]
    pub joint_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses `args` and runs the command, returning the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let _ = write!(stderr, "{}", e.render());
            return 2;
        }
        Err(e) => {
            let _ = write!(stdout, "{}", e.render());
            return 0;
        }
    };
    match commands::execute(&cli, stdout, stderr) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
