//! `kpidyn`: command-line access to KPI dynamics.
//!
//! Exit codes: 0 success, 1 domain error (JSON on stderr), 2 usage error.

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print and exit 0; everything else is usage (2).
            e.exit();
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({"error": {"kind": e.kind(), "message": e.to_string()}});
            eprintln!("{body}");
            ExitCode::from(1)
        }
    }
}
