use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = duoformer_harness::cli::Cli::parse();
    match duoformer_harness::cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
