//! Binary entry point: parses arguments, dispatches the subcommand, and
//! maps failure categories onto distinct exit codes.

mod commands;
mod config;

use clap::Parser;

fn main() {
    let cli = commands::Cli::parse();
    if let Err(failure) = commands::dispatch(cli) {
        eprintln!("{}", failure.line());
        std::process::exit(failure.exit_code());
    }
}
