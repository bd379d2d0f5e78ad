//! `fearscope`: ingest → align → features → fuse → build → train → eval → predict,
//! plus `synth`, `fixture`, `stats` and `serve`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "fearscope", version, about = "Multi-modal fear recognition toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON config layered over the built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set net.hidden_size=32`; the value is parsed as JSON when possible.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for synthesis, splitting and network initialization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic session with planted ground truth.
    Synth {
        #[arg(long)]
        seconds: Option<f64>,
        #[arg(long)]
        fps: Option<f64>,
        #[arg(long)]
        session_id: Option<String>,
        /// Output directory; defaults to the session id.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the planted-separable training fixture as a dataset directory.
    Fixture {
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate session streams and report rejected rows.
    Ingest {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resample one session's keypoints and physiology onto its frame clock.
    Align {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame audio features for one session.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame fused labels from the annotations file or an annotation-service log.
    FuseLabels {
        #[arg(long)]
        manifest: PathBuf,
        /// Annotation-service JSONL log or plain span JSONL used instead of the manifest's annotations.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the feature dataset from session manifests or directories.
    Build {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the BLSTM+attention classifier on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss and validation accuracy CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Stop after this many epochs without a validation-accuracy improvement.
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, validation, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        /// JSON report path; the table always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict every window of a dataset.
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-level label and signal statistics.
    Stats {
        /// Session manifests or directories.
        inputs: Vec<PathBuf>,
        /// A built dataset directory instead of sessions.
        #[arg(long, conflicts_with = "inputs")]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the annotation service.
    Serve {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory for the per-session annotation logs.
        #[arg(long, default_value = "annotations")]
        store: PathBuf,
    },
}

/// A failure reported as one JSON line on stderr.
#[derive(Debug)]
pub struct CliError {
    pub module: &'static str,
    pub message: String,
    /// The reader of stdout went away; exit without a report.
    pub broken_pipe: bool,
}

impl CliError {
    pub fn new(module: &'static str, message: impl Into<String>) -> Self {
        Self { module, message: message.into(), broken_pipe: false }
    }
}

impl From<fearscope_core::pipeline::PipelineError> for CliError {
    fn from(e: fearscope_core::pipeline::PipelineError) -> Self {
        Self::new(e.module(), e.to_string())
    }
}

fn report(e: &CliError) {
    eprintln!("{}", json!({"error": {"module": e.module, "message": e.message}}));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            report(&CliError::new("cli", first));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.broken_pipe => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
