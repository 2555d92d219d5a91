//! Command line front end: runs a preset from a `key = value` file and
//! writes the artifacts into an output directory.
//!
//! Any failure, including unknown or malformed configuration keys, aborts
//! before the output directory is touched and prints a one-line JSON error
//! record to stderr.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use fnpde::config::ConfigMap;
use fnpde::runner::{run_config, write_report};
use fnpde::Error;

#[derive(Parser)]
#[command(
    name = "fnpde",
    version,
    about = "Backward Monte Carlo solver for fully nonlinear parabolic PDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the preset described by a configuration file.
    ///
    /// The resolved configuration, results, diagnostics, and any extracted
    /// surfaces are written into OUT_DIR. Re-running the recorded
    /// metadata.kv reproduces every file byte for byte.
    Run {
        /// Path to the `key = value` configuration file.
        config: PathBuf,
        /// Directory that receives the run artifacts (created if absent).
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> fnpde::Result<()> {
    match cli.command {
        Command::Run { config, out_dir } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg = ConfigMap::parse(&text)?;
            let started = Instant::now();
            let report = run_config(&mut cfg)?;
            let elapsed = started.elapsed();
            let written = write_report(&report, &out_dir)?;
            println!("preset = {}", report.preset);
            for (key, value) in &report.scalars {
                println!("{key} = {value}");
            }
            for path in &written {
                println!("wrote {}", path.display());
            }
            println!("elapsed_seconds = {:.3}", elapsed.as_secs_f64());
            Ok(())
        }
    }
}

fn error_record(err: &Error) -> String {
    let kind = match err {
        Error::Config(_) => "config",
        Error::SingularDiffusion { .. } => "singular_diffusion",
        Error::Numerical(_) => "numerical",
        Error::Io(_) => "io",
    };
    format!(
        "{{\"error\":\"{kind}\",\"message\":\"{}\"}}",
        json_escape(&err.to_string())
    )
}

fn json_escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => {
                out.push_str(&format!("\\u{:04x}", c as u32));
            }
            c => out.push(c),
        }
    }
    out
}
