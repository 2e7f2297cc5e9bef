//! Command-line pipeline: cohort generation, alignment, instruction tuning,
//! evaluation, ablations and reporting over one artifact directory.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "oculus", version, about = "Biomarker-grounded retinal report pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Artifact directory. Defaults to the configured path, then
    /// $OCULUS_ARTIFACTS, then ./artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize and annotate the cohort and write instruction pairs.
    Gen(CommonArgs),
    /// Contrastively align the OCT and CFP encoders.
    Align(CommonArgs),
    /// Instruction-tune projectors and decoder over the frozen encoders.
    Sft(CommonArgs),
    /// Generate and grade held-out reports.
    Eval(CommonArgs),
    /// Compare the full model with the configured ablations.
    Ablate(CommonArgs),
    /// Render the evaluation aggregate as text or CSV.
    Report {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

impl Command {
    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::Gen(c) | Command::Align(c) | Command::Sft(c) | Command::Eval(c) | Command::Ablate(c) => c,
            Command::Report { common, .. } => common,
        }
    }
}

/// Resolves configuration and artifact directory for the given flags.
pub fn resolve(args: &CommonArgs) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let dir = cfg.artifact_dir(args.out.as_deref());
    cfg.paths.artifact_dir = None;
    Ok((cfg, dir))
}

/// Runs one subcommand and returns what should be printed on success.
pub fn run(cli: Cli) -> Result<String, CliError> {
    let (cfg, dir) = resolve(cli.command.common())?;
    let manifest = match &cli.command {
        Command::Gen(_) => commands::gen(&cfg, &dir)?,
        Command::Align(_) => commands::align(&cfg, &dir)?,
        Command::Sft(_) => commands::sft(&cfg, &dir)?,
        Command::Eval(_) => commands::eval(&cfg, &dir)?,
        Command::Ablate(_) => commands::ablate(&cfg, &dir)?,
        Command::Report { format, .. } => {
            let format = match format {
                Format::Text => commands::ReportFormat::Text,
                Format::Csv => commands::ReportFormat::Csv,
            };
            return Ok(commands::report(&cfg, &dir, format)?.1);
        }
    };
    let mut out = format!(
        "{} finished in {:.1}s, wrote {} artifact(s) to {}\n",
        manifest.command,
        manifest.wall_time_secs,
        manifest.outputs.len(),
        dir.display()
    );
    for (name, hash) in &manifest.outputs {
        out.push_str(&format!("  {name}  {hash}\n"));
    }
    Ok(out)
}
