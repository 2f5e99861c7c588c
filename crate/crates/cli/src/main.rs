use std::process::ExitCode;

use clap::Parser;
use ctsf_cli::{error_line, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match run(&cli, argv) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serialises"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(cli.command.name(), &e));
            ExitCode::FAILURE
        }
    }
}
