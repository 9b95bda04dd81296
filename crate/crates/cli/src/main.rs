mod commands;
mod failure;
mod settings;

use std::fs;
use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Value};

use commands::Outcome;
use failure::Failure;
use settings::{Command, Flags, Format, RunConfig};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Panel threshold regression with unit-specific thresholds and interactive fixed effects.
#[derive(Debug, Parser)]
#[command(name = "cce-threshold", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

enum Status {
    Complete,
    Partial,
}

fn emit(cfg: &RunConfig, bytes: &[u8]) -> Result<(), Failure> {
    match &cfg.out {
        Some(path) => fs::write(path, bytes).map_err(|e| Failure::io(path, e)),
        None => std::io::stdout().lock().write_all(bytes).map_err(|e| Failure::io("stdout", e)),
    }
}

fn envelope(cfg: &RunConfig, grid: Value, ingestion: Value, partial: bool, results: Value) -> Vec<u8> {
    let report = json!({
        "tool": "cce-threshold",
        "version": VERSION,
        "command": cfg.command.name(),
        "seed": cfg.seed,
        "config": cfg,
        "grid": grid,
        "data": ingestion,
        "partial": partial,
        "results": results,
    });
    let mut s = serde_json::to_string_pretty(&report).expect("report serializes");
    s.push('\n');
    s.into_bytes()
}

fn run(command: Command, flags: &Flags) -> Result<Status, Failure> {
    let cfg = RunConfig::resolve(command, flags)?;
    if let Some(j) = cfg.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot start {j} worker threads: {e}")))?;
    }

    if command == Command::Simulate {
        let (panel_csv, truth, ingestion) = commands::simulate_panel(&cfg)?;
        emit(&cfg, &panel_csv)?;
        if let Some(path) = &cfg.truth {
            let bytes = envelope(&cfg, Value::Null, json!(ingestion), false, truth);
            fs::write(path, bytes).map_err(|e| Failure::io(path, e))?;
        }
        return Ok(Status::Complete);
    }

    let outcome: Outcome = match command {
        Command::EstimateHet => commands::estimate_het(&cfg)?,
        Command::EstimateSemi => commands::estimate_semi(&cfg)?,
        Command::TestLinearity => commands::test_linearity(&cfg)?,
        Command::Ci => commands::ci(&cfg)?,
        Command::Select => commands::select(&cfg)?,
        Command::Mc => commands::monte_carlo(&cfg)?,
        Command::Simulate => unreachable!(),
    };
    match cfg.format {
        Format::Json => {
            let bytes = envelope(&cfg, outcome.grid, json!(outcome.ingestion), outcome.partial, outcome.results);
            emit(&cfg, &bytes)?;
        }
        Format::Csv => emit(&cfg, &outcome.csv)?,
    }
    Ok(if outcome.partial { Status::Partial } else { Status::Complete })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli.command, &cli.flags) {
        Ok(Status::Complete) => ExitCode::SUCCESS,
        Ok(Status::Partial) => {
            log::warn!("some units or replications failed; see the report");
            ExitCode::from(2)
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(1)
        }
    }
}
