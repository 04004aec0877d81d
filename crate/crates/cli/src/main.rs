//! `thermo`: dataset generation, ground-truth solves, surrogate training,
//! evaluation reports, and field export.

mod args;
mod commands;
mod export;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] thermo_core::Error),
    #[error(transparent)]
    Surrogate(#[from] thermo_surrogate::Error),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
    #[error("{0}")]
    Input(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = match args::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
