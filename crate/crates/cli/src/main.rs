use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = match bilin_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { bilin_cli::EXIT_USAGE } else { 0 });
        }
    };
    match bilin_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(bilin_cli::exit_code(&e))
        }
    }
}
