use std::io::ErrorKind;
use std::process::ExitCode;

use clap::Parser;
use ossa_cli::{run, Cli, CliError};
use ossa_core::Error;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli, &mut std::io::stdout().lock()) {
        Ok(()) => ExitCode::SUCCESS,
        // downstream reader closed early, e.g. `ossa attribute ... | head`
        Err(CliError::Core(Error::Io(e))) if e.kind() == ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
