//! Batch front-end: `streamsim <command> --config <file> --out <dir>`.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 I/O failure, 3 a
//! simulation, tuning or calibration precondition failed.

pub mod config;
pub mod run;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::Parser;

pub use config::{parse_config, CommandKind, CommandSpec, ConfigError, ExperimentConfig, SweepAxis};
pub use run::{run, RunError, RunOutcome};

#[derive(Debug, Parser)]
#[command(
    name = "streamsim",
    about = "Simulate and tune multi-stream offload pipelines",
    after_help = "Tuning with heuristics searches aligned partition counts and T = m * P for \
                  m <= m_max (default 16); raise m_max in [command] to reach finer tilings."
)]
struct Args {
    /// calibrate, simulate, sweep, tune or report; overrides `kind` in [command].
    command: Option<String>,
    /// Experiment config; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `dir` in [output].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Prune the tuning space (on) or search the full grid (off).
    #[arg(long, value_parser = ["on", "off"])]
    heuristics: Option<String>,
    /// Reserved; the engine is deterministic.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &Args) -> Result<ExperimentConfig, RunError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| RunError::Io {
                path: path.clone(),
                source,
            })?;
            parse_config(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(cmd) = &args.command {
        config.command.kind = cmd.parse().map_err(|message| ConfigError {
            line: None,
            key: "command".into(),
            message,
        })?;
        // Sweep ranges are only checked for sweeps; recheck after the override.
        if config.command.kind == CommandKind::Sweep {
            config = parse_config(&config.to_text())?;
        }
    }
    if let Some(h) = &args.heuristics {
        config.command.heuristics = h == "on";
    }
    Ok(config)
}

/// Parses `args` (program name first), runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = load(&args).and_then(|config| {
        let out = args
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(&config.output_dir));
        run(&config, &out)
    });
    match result {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            0
        }
        Err(e) => {
            eprintln!("streamsim: {e}");
            e.exit_code()
        }
    }
}
