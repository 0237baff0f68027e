//! Command-line front end: configuration layering, run orchestration and
//! the CSV/JSON artifacts every command leaves behind.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod report;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use commands::{execute, CommandOutput};
pub use config::{Command, RunConfig};
pub use error::CliError;

/// Parses `argv` into a resolved configuration: config file first, then
/// flags, then the command's defaults.
pub fn parse_cli<I, S>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = args::Cli::try_parse_from(argv).map_err(|e| CliError::Usage(e.render().to_string()))?;
    let (command, flags) = cli.command.split();
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.overlay(&flags.to_config());
    cfg.resolve(command)
}

/// Runs the program and returns its exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let argv: Vec<S> = argv.into_iter().collect();
    if let Err(e) = args::Cli::try_parse_from(argv.clone()) {
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
            let _ = e.print();
            return if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 };
        }
        let _ = e.print();
        return 1;
    }
    match parse_cli(argv).and_then(|cfg| execute(&cfg)) {
        Ok(out) => {
            eprintln!("wrote {}", out.out_dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
