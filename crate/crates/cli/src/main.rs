mod args;
mod commands;
mod data;
mod output;
mod simulate;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};
use output::CliError;

fn main() -> ExitCode {
    let argv = match args::expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => return e.report(),
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            return CliError::usage(e.to_string().trim_end()).report();
        }
    };
    let result = match &cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Impute(a) => commands::impute(a),
        Command::Intervals(a) => commands::intervals(a),
        Command::Trend(a) => commands::trend(a),
        Command::Changepoint(a) => commands::changepoint(a),
        Command::Simulate(a) => simulate::run(a),
        Command::CheckIdentifiability(a) => commands::check_identifiability(a),
    };
    match result {
        Ok(manifest) => {
            println!("{}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => e.report(),
    }
}
