//! `invexnet` command line: train, verify, morph, export-grid and serve.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or input error,
//! 3 numeric divergence, 4 I/O error.

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod config;
mod data;
mod export;
mod morph;
mod serve;
mod train;
mod verify;

pub use config::{Method, Resolved, RunConfig};
pub use train::Summary;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGED: i32 = 3;
    pub const IO: i32 = 4;

    pub fn config(message: impl Into<String>) -> Self {
        Self { code: Self::CONFIG, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: Self::IO, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<invexnet::Error> for CliError {
    fn from(e: invexnet::Error) -> Self {
        use invexnet::Error as E;
        let code = match &e {
            E::Diverged { .. } => Self::DIVERGED,
            E::Io(_) => Self::IO,
            E::InvalidArgument(_) | E::Dimension { .. } | E::Unsupported(_) | E::Parse { .. } | E::Json(_) | E::Csv(_) => Self::CONFIG,
            _ => Self::OTHER,
        };
        Self { code, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "invexnet", version, about = "Train, verify and edit input-invex networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint.json, metrics.csv and summary.json.
    Train {
        /// TOML or JSON run config; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: RunConfig,
    },
    /// Check invexity, Lipschitz bound and region connectedness of a checkpoint.
    Verify(verify::VerifyArgs),
    /// Apply an add/remove/finetune script to a multi_invex checkpoint.
    Morph(morph::MorphArgs),
    /// Rasterize a checkpoint over a 2D box as CSV or JSON.
    ExportGrid(export::ExportArgs),
    /// Run the morphism HTTP service.
    Serve(serve::ServeArgs),
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config, flags } => {
            let base = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            let cfg = base.merge(&flags).resolve()?;
            let summary = train::run(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary).map_err(|e| CliError::config(e.to_string()))?);
            Ok(())
        }
        Command::Verify(a) => verify::run(&a),
        Command::Morph(a) => morph::run(&a),
        Command::ExportGrid(a) => export::run(&a),
        Command::Serve(a) => serve::run(&a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
/// Argument errors exit 2 through clap; help and version exit 0.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { CliError::CONFIG } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
