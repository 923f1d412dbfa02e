//! `facefit` command-line front end.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(if cli.global.verbose {
            "debug"
        } else {
            "warn"
        }),
    )
    .init();
    let error_json = cli.global.error_json;
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if error_json {
                let kind = e
                    .downcast_ref::<facefit::Error>()
                    .map_or("other", facefit::Error::kind);
                let body = serde_json::json!({
                    "error": kind,
                    "message": message(&e),
                });
                eprintln!("{body}");
            } else {
                eprintln!("error: {}", message(&e));
            }
            ExitCode::FAILURE
        }
    }
}

/// Causes joined by `: `, skipping any already quoted by the previous one.
fn message(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for c in e.chain() {
        let s = c.to_string();
        if parts.last().is_some_and(|p| p.ends_with(&s)) {
            continue;
        }
        parts.push(s);
    }
    parts.join(": ")
}
