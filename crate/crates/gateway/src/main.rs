use std::process::ExitCode;

use clap::Parser;

use fsmqa_gateway::cli::{self, Cli};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let parsed = Cli::parse();
    let stage = parsed.command.name();
    match cli::execute(parsed, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsmqa {stage}: {e:#}");
            ExitCode::FAILURE
        }
    }
}
