//! Experiment driver: synthetic cohorts, encoder pretraining, prognosis
//! fine-tuning, and report generation, all reproducible from manifests.

mod data;
mod evaluate;
mod finetune;
mod manifest;
mod plots;
mod pretrain;
mod synth;

use clap::{Parser, Subcommand};

use manifest::Manifest;

/// Usage mistakes exit with 2, runtime failures with 1.
pub enum CliError {
    Usage(String),
    Run(String),
}

impl From<prognosis_core::Error> for CliError {
    fn from(e: prognosis_core::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Run(msg.into())
}

#[derive(Parser)]
#[command(name = "prognosis", version, about = "Deterioration prognosis experiments on chest radiographs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: images plus event and scan tables.
    Synth(synth::SynthArgs),
    /// Pretrain an encoder on a cohort's images.
    Pretrain(pretrain::PretrainArgs),
    /// Cross-validated fine-tuning with grid selection.
    Finetune(finetune::FinetuneArgs),
    /// Score a model and report AUCs with confidence intervals.
    Evaluate(evaluate::EvaluateArgs),
    /// Tabulate adverse event counts per prediction window.
    PlotEvents(plots::PlotEventsArgs),
    /// Repeat a previous run from its manifest.
    Rerun(RerunArgs),
}

#[derive(clap::Args)]
struct RerunArgs {
    /// Manifest JSON written by a previous run.
    #[arg(long)]
    manifest: String,
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth(args) => synth::run(&args),
        Command::Pretrain(args) => pretrain::run(&args),
        Command::Finetune(args) => finetune::run(&args),
        Command::Evaluate(args) => evaluate::run(&args),
        Command::PlotEvents(args) => plots::run(&args),
        Command::Rerun(args) => {
            let m = manifest::read(std::path::Path::new(&args.manifest))?;
            match m {
                Manifest::Synth(a) => synth::run(&a),
                Manifest::Pretrain(a) => pretrain::run(&a),
                Manifest::Finetune(a) => finetune::run(&a),
                Manifest::Evaluate(a) => evaluate::run(&a),
                Manifest::PlotEvents(a) => plots::run(&a),
            }
        }
    }
}

fn main() {
    // Die quietly when a downstream pipe closes (head, less), like any
    // other Unix filter, instead of panicking mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
