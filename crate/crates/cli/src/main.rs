//! `bbrefine`: generate, corrupt, refine, score and train on backbone structures.
//!
//! Failures print a single line `error<TAB>kind<TAB>message` to stderr and
//! exit nonzero (2 for usage errors, 1 otherwise).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use backbone_refine::Error;
use clap::{Parser, Subcommand};

use commands::CliError;
use config::*;

#[derive(Debug, Parser)]
#[command(name = "bbrefine", version, about = "Backbone diffusion and refinement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write ideal helices or strands plus a manifest.
    GenSynthetic(GenSyntheticArgs),
    /// Diffuse manifest references forward to a timestep.
    Corrupt(CorruptArgs),
    /// Iteratively refine manifest decoys.
    Refine(RefineArgs),
    /// Score decoys (and refined models) against references.
    Eval(EvalArgs),
    /// Train the refiner network.
    Train(TrainArgs),
    /// Build a variance schedule and print or dump it.
    Schedule(ScheduleArgs),
    /// Re-execute a recorded run.json.
    Run { path: PathBuf },
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    if let Some(c) = e.downcast_ref::<CliError>() {
        return match c {
            CliError::Exists(_) => "exists",
            CliError::Usage(_) => "usage",
        };
    }
    if let Some(lib) = e.downcast_ref::<Error>() {
        return match lib {
            Error::DegenerateResidue { .. } => "degenerate_residue",
            Error::Parse { .. } => "parse",
            Error::EmptyStructure => "empty_structure",
            Error::InvalidStructure(_) => "invalid_structure",
            Error::Manifest { .. } => "manifest",
            Error::InvalidSchedule(_) => "invalid_schedule",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::DegenerateSubset => "degenerate_subset",
            Error::TooShort { .. } => "too_short",
            Error::InvalidTimestep { .. } => "invalid_timestep",
            Error::DivergedTraining { .. } => "diverged_training",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        };
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        "json"
    } else if e.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else {
        "other"
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("error\t{kind}\t{}", one_line(message));
    ExitCode::from(code)
}

fn to_run(cmd: Command) -> anyhow::Result<RunConfig> {
    Ok(match cmd {
        Command::GenSynthetic(a) => RunConfig::GenSynthetic(a),
        Command::Corrupt(a) => RunConfig::Corrupt(a),
        Command::Refine(a) => RunConfig::Refine(a),
        Command::Eval(a) => RunConfig::Eval(a),
        Command::Train(a) => RunConfig::Train(a),
        Command::Schedule(a) => RunConfig::Schedule(a),
        Command::Run { path } => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| anyhow::Error::new(e).context(format!("reading {}", path.display())))?;
            RunConfig::from_json(&text)?
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let head: Vec<&str> = msg.lines().take_while(|l| !l.trim().is_empty()).collect();
            return fail("usage", head.join(" ").trim_start_matches("error: "), 2);
        }
    };
    match to_run(cli.command).and_then(|cfg| commands::run(&cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = error_kind(&e);
            fail(kind, &format!("{e:#}"), if kind == "usage" { 2 } else { 1 })
        }
    }
}
