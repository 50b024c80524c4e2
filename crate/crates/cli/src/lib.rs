//! File formats, run configuration and the `spherewarp` command-line tool.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod format;
pub mod gradsuite;
pub mod provenance;

use clap::error::ErrorKind;
use clap::Parser;

pub use commands::{Cli, Command, RegistrationReport};
pub use config::RunConfig;
pub use dataset::{DatasetLayout, DatasetManifest};
pub use error::{Category, CliError};
pub use format::{decode_map, encode_map, read_map, write_map, GridMap, MapKind};
pub use provenance::RunContext;

/// The one environment variable read by the tool.
pub const THREADS_ENV: &str = "SPHEREWARP_THREADS";

/// Worker count from [`THREADS_ENV`]; 1 when unset.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(CliError::usage(format!("{THREADS_ENV}: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'"))),
        },
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Failures print a single `error[<category>]: <message>` line to stderr.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            let err = CliError::usage(first.to_string());
            eprintln!("{}", err.line());
            return err.category.exit_code();
        }
    };
    let result = threads_from_env().and_then(|threads| commands::dispatch(&cli, &RunContext::new(argv, threads)));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.category.exit_code()
        }
    }
}
