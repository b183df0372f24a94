use std::process::ExitCode;

use clap::Parser;
use lpo_rec_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
