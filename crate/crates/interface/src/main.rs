use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    aird_cli::cli::main_with(aird_cli::cli::Cli::parse())
}
