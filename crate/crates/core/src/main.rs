use std::process::ExitCode;

use clap::Parser;
use dcadose::cli::{run, Cli};

fn main() -> ExitCode {
    // Parse failures exit with clap's usage code 2; --help and --version exit 0.
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    run(cli)
}
