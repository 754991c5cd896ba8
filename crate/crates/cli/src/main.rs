use std::process::ExitCode;

use clap::Parser;
use vanishcost_cli::{execute, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.group) {
        Ok(report) => {
            for line in &report.summary {
                println!("{line}");
            }
            println!("artifacts in {}", report.out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
