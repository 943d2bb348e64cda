use std::process::ExitCode;

use clap::Parser;
use exf_cli::commands::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match exf_cli::init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.to_exit()
        }
    }
}
