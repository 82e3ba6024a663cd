//! `evalign`: generate a synthetic corpus, train the dual encoder, evaluate
//! it, and run the reading study.
//!
//! Exit status: 0 on success, 1 on invalid input or configuration, 2 on
//! runtime failure.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use evalign_core::Error as CoreError;
use evalign_study::StudyError;

/// Marks an error as the caller's fault (exit 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Debug, Parser)]
#[command(name = "evalign", version, about = "Evidential image-text alignment at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config with flat dotted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed key (corpus, encoder init, training, probe).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding inputs and outputs.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// key=value override; repeatable; wins over the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, Debug, Subcommand)]
enum Command {
    /// Generate the synthetic paired corpus.
    Gen,
    /// Train the dual encoder on the corpus.
    Train,
    /// Export image embeddings for the evaluation split.
    Embed,
    /// Zero-shot Top-K classification from text prompts.
    Zeroshot,
    /// Leave-one-out image retrieval.
    Retrieve,
    /// Linear probes on frozen embeddings across domains.
    Probe,
    /// Serve the reading-study HTTP API.
    Serve,
    /// Summarize the reading-study event log.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Train => "train",
            Command::Embed => "embed",
            Command::Zeroshot => "zeroshot",
            Command::Retrieve => "retrieve",
            Command::Probe => "probe",
            Command::Serve => "serve",
            Command::Report => "report",
        }
    }
}

fn is_invalid(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        if e.is::<Invalid>() {
            return true;
        }
        if let Some(c) = e.downcast_ref::<CoreError>() {
            return matches!(
                c,
                CoreError::Config(_)
                    | CoreError::Contract(_)
                    | CoreError::Stratification(_)
                    | CoreError::Vocabulary { .. }
                    | CoreError::HashMismatch { .. }
            );
        }
        if let Some(s) = e.downcast_ref::<StudyError>() {
            return matches!(
                s,
                StudyError::Validation(_)
                    | StudyError::NotFound(_)
                    | StudyError::Conflict(_)
                    | StudyError::Protocol(_)
                    | StudyError::NoCompletedReaders
            );
        }
        false
    })
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let resolved = config::resolve(cli.common.config.as_deref(), cli.common.seed, &cli.common.sets)?;
    let out: &Path = &cli.common.out;
    std::fs::create_dir_all(out).map_err(|e| anyhow::anyhow!("creating {}: {e}", out.display()))?;
    let cmd = cli.command;
    let snapshot = out.join(format!("resolved_config.{}.json", cmd.name()));
    std::fs::write(&snapshot, resolved.snapshot()).map_err(|e| anyhow::anyhow!("writing {}: {e}", snapshot.display()))?;
    log::debug!("resolved config written to {}", snapshot.display());
    match cmd {
        Command::Gen => commands::gen(&resolved, out),
        Command::Train => commands::train(&resolved, out),
        Command::Embed => commands::embed(&resolved, out),
        Command::Zeroshot => commands::zeroshot(&resolved, out),
        Command::Retrieve => commands::retrieve(&resolved, out),
        Command::Probe => commands::probe(&resolved, out),
        Command::Serve => commands::serve(&resolved, out),
        Command::Report => commands::report(&resolved, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EVALIGN_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = if is_invalid(&err) { 1 } else { 2 };
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
