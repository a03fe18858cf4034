//! Thin entry point: parse arguments, dispatch, map errors to exit codes.

use clap::Parser;
use flexcausal::cli::{run, Cli, CliError};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            if e.use_stderr() {
                eprintln!("usage: {}", e.kind());
                std::process::exit(CliError::Usage(String::new()).exit_code());
            }
            print!("{e}");
            return;
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
