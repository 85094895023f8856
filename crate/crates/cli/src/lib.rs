//! Command-line orchestration: synthetic store generation, federated
//! training runs, evaluation and gradient checks.
//!
//! The binary is a thin wrapper around [`run`]; every command is also
//! callable directly so tests can drive it without spawning processes.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use feddcg_core::inference::Aggregator;
use thiserror::Error;

pub use commands::{
    eval, gen_synthetic, gradcheck, train, EvalArgs, EvalReport, GenSyntheticArgs, GradcheckArgs,
    TrainSummary,
};
pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] feddcg_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A numerical check ran to completion and failed.
    #[error("{0}")]
    NumericCheck(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use feddcg_core::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(E::Config(_) | E::Argument(_)) => EXIT_USAGE,
            CliError::Core(_) | CliError::Io { .. } => EXIT_DATA,
            CliError::NumericCheck(_) => EXIT_NUMERIC,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "feddcg",
    version,
    about = "Federated prompt learning for class and domain generalization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a deterministic synthetic embedding store.
    GenSynthetic(GenSyntheticArgs),
    /// Run federated training from a config file.
    Train(TrainCmd),
    /// Evaluate a checkpoint on a store.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub(crate) fn parse_aggregator(s: &str) -> Result<Aggregator, String> {
    s.parse::<Aggregator>().map_err(|e| e.to_string())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenSynthetic(args) => {
            let manifest = gen_synthetic(&args)?;
            println!(
                "wrote {}: {} domains, {} classes, {} images, dim {}, token_dim {}",
                args.out.display(),
                manifest.num_domains,
                manifest.num_classes,
                manifest.num_images,
                manifest.dim,
                manifest.token_dim
            );
        }
        Command::Train(cmd) => {
            let mut config = RunConfig::load(&cmd.config)?;
            if let Some(out) = cmd.out {
                config.output_dir = out;
            }
            let summary = train(&config)?;
            println!(
                "trained {} rounds; final checkpoint {}",
                summary.rounds, summary.final_checkpoint
            );
            for results in &summary.eval {
                print!("{}", results.table);
            }
        }
        Command::Eval(args) => {
            let report = eval(&args)?;
            print!("{}", report.table);
        }
        Command::Gradcheck(args) => {
            let results = gradcheck(&args)?;
            for r in &results {
                println!(
                    "seed {:>4}  stage A {:.3e}  stage B {:.3e}  {}",
                    r.seed,
                    r.stage_a_max_rel,
                    r.stage_b_max_rel,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                return Err(CliError::NumericCheck(format!(
                    "{failed} of {} seeds exceed the relative error bound",
                    results.len()
                )));
            }
        }
    }
    Ok(())
}
