use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    ExitCode::from(afca_lab::run(afca_lab::Cli::parse()))
}
