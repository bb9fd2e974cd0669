//! Command-line front end. Exit code 2 means bad input (arguments, architecture
//! files, missing run artifacts); 1 means the work itself failed.

mod args;
mod commands;

use std::path::PathBuf;

use clap::Parser;
use thiserror::Error;

use layerscope::arch::ArchError;
use layerscope::engine::EngineError;
use layerscope::report::ReportError;
use layerscope::rf::RfError;
use layerscope::store::StoreError;

use args::{Cli, Command};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("run directory is in use ({0} exists)")]
    Locked(PathBuf),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Rf(#[from] RfError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        let validation = match self {
            CliError::Validation(_) | CliError::Locked(_) | CliError::Arch(_) | CliError::Rf(_) => true,
            CliError::Engine(e) => matches!(
                e,
                EngineError::Config(_) | EngineError::Dataset(_) | EngineError::Shape { .. } | EngineError::Arch(_)
            ),
            CliError::Report(e) => matches!(
                e,
                ReportError::NoDumps(_)
                    | ReportError::HashMismatch { .. }
                    | ReportError::UnknownLayer(_)
                    | ReportError::TooFewLayers(_)
            ),
            _ => false,
        };
        if validation {
            2
        } else {
            1
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LAYERSCOPE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::Validation(format!("LAYERSCOPE_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(CliError::Validation("LAYERSCOPE_THREADS must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Validation(e.to_string()))
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = init_threads().and_then(|_| match &cli.command {
        Command::Rf(a) => commands::cmd_rf(a),
        Command::Train(a) => commands::cmd_train(a),
        Command::Capture(a) => commands::cmd_capture(a),
        Command::Analyze(a) => commands::cmd_analyze(a),
        Command::Chart(a) => commands::cmd_chart(a),
        Command::Full(a) => commands::cmd_full(a),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
