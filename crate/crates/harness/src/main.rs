use std::process::ExitCode;

use clap::Parser;
use lookbehind_harness::cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            for path in &outcome.written {
                println!("wrote {}", path.display());
            }
            if outcome.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &outcome.failures {
                    eprintln!("lookbehind: {f}");
                }
                ExitCode::from(3)
            }
        }
        Err(e) => {
            eprintln!("lookbehind: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
