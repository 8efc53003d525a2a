//! Command-line front end: generate, train, eval, fuse, report, pipeline.
//!
//! Exit status 0 is success, 1 a runtime failure and 2 a usage or
//! configuration error. Every failure prints one line starting `error:` on
//! standard error.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use trimodal_core::fusion::Strategy;
use trimodal_core::modalities::Modality;

use commands::SplitName;
use config::{Overrides, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<trimodal_core::Error> for CliError {
    fn from(e: trimodal_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Success,
    Failure,
    Usage,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::Failure => 1,
            ExitStatus::Usage => 2,
        }
    }
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    s.parse().map_err(|e: trimodal_core::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: trimodal_core::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitName, String> {
    match s {
        "train" => Ok(SplitName::Train),
        "val" => Ok(SplitName::Val),
        "test" => Ok(SplitName::Test),
        other => Err(format!("unknown split {other:?} (train, val, test)")),
    }
}

/// Multimodal AD classifier: three branch networks combined by late fusion.
#[derive(Debug, Parser)]
#[command(name = "trimodal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; branch seeds are seed+1, seed+2, seed+3
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Working directory for data, checkpoints and reports
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Number of synthetic subjects
    #[arg(long, global = true)]
    n_subjects: Option<usize>,
    /// Image side in pixels (multiple of 8)
    #[arg(long, global = true)]
    image_side: Option<usize>,
    /// Epochs for every branch
    #[arg(long, global = true)]
    epochs: Option<usize>,
}

#[derive(Debug, Args)]
struct FusionFlags {
    /// weighted, majority, bayes or stacked
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    /// Prior probability of class 1 for log-odds pooling
    #[arg(long)]
    prior: Option<f64>,
    /// Treat one modality as missing for every subject
    #[arg(long, value_parser = parse_modality)]
    drop_modality: Option<Modality>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (PGM images, manifest, sequence CSVs)
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train one branch and write its checkpoint and history
    Train {
        #[command(flatten)]
        common: Common,
        /// image, cognitive or biomarker
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
    },
    /// Evaluate one checkpoint on a split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_modality)]
        modality: Modality,
        /// train, val or test
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: SplitName,
    },
    /// Fuse the available checkpoints over the test split
    Fuse {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fusion: FusionFlags,
    },
    /// Metrics table for every branch and every fusion strategy
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fusion: FusionFlags,
    },
    /// generate, train all branches, fuse and report with one seed
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fusion: FusionFlags,
    },
}

impl Common {
    fn overrides(&self, fusion: Option<&FusionFlags>) -> Overrides {
        Overrides {
            seed: self.seed,
            workdir: self.workdir.clone(),
            n_subjects: self.n_subjects,
            image_side: self.image_side,
            epochs: self.epochs,
            strategy: fusion.and_then(|f| f.strategy),
            prior: fusion.and_then(|f| f.prior),
        }
    }

    fn resolve(&self, fusion: Option<&FusionFlags>) -> Result<RunConfig, CliError> {
        RunConfig::resolve(self.config.as_deref(), &self.overrides(fusion))
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Generate { common } => commands::generate(&common.resolve(None)?),
        Command::Train { common, modality } => commands::train(&common.resolve(None)?, modality),
        Command::Eval { common, modality, split } => commands::eval(&common.resolve(None)?, modality, split),
        Command::Fuse { common, fusion } => commands::fuse(&common.resolve(Some(&fusion))?, fusion.drop_modality),
        Command::Report { common, fusion } => {
            commands::report(&common.resolve(Some(&fusion))?, fusion.drop_modality)
        }
        Command::Pipeline { common, fusion } => {
            commands::pipeline(&common.resolve(Some(&fusion))?, fusion.drop_modality)
        }
    }
}

/// Usage text printed by `--help`.
pub fn usage() -> String {
    Cli::command().render_help().to_string()
}

/// Parses `args` (program name first), runs the subcommand and reports the
/// outcome on standard output and standard error.
pub fn run_cli<I, T>(args: I) -> ExitStatus
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitStatus::Success;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            eprintln!("error: missing subcommand");
            eprint!("{}", usage());
            return ExitStatus::Usage;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let first = rendered.lines().next().unwrap_or("error: invalid arguments");
            eprintln!("{}", if first.starts_with("error:") { first.to_owned() } else { format!("error: {first}") });
            eprint!("{}", Cli::command().render_usage());
            eprintln!();
            return ExitStatus::Usage;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitStatus::Success,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {}", m.replace('\n', " "));
            ExitStatus::Usage
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {}", m.replace('\n', " "));
            ExitStatus::Failure
        }
    }
}
