use std::process::ExitCode;

use clap::Parser;
use loract_cli::{configure_threads, run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("loract: {e}");
        return ExitCode::from(2);
    }
    match run(&cli) {
        Ok(outcome) => {
            for c in outcome.report.checks.iter().filter(|c| !c.passed) {
                eprintln!("FAIL {}: {}", c.name, c.detail);
            }
            for path in &outcome.written {
                println!("{}", path.display());
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("loract {}: {e}", cli.command.name());
            ExitCode::from(2)
        }
    }
}
