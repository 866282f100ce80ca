use std::process::ExitCode;

use clap::Parser;
use palm_cli::app::{main_with, Cli, EXIT_CONFIG};

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => main_with(cli),
        // Usage errors are configuration errors; exit code 2 means divergence.
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
    }
}
