//! Command-line front end: one subcommand per layer, each reading a scenario
//! file and writing a trace, a report and a replay manifest.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tactica::runner::{execute, Command};
use tactica::scenario::{
    load_scenario, parse_manifest, replay_run, write_text, write_trace, Overrides, RunManifest, TraceFormat,
};
use tactica::Error;

pub const SEED_ENV: &str = "TACTICA_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_REPLAY: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "tactica", version, about = "Simulate tactical differential games from scenario files")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Integrate the state and record every node.
    Simulate(RunArgs),
    /// Segment a run into windows and fit a recurrence to the transcript.
    Verbalize(RunArgs),
    /// Run the full comment loop.
    Tactical(RunArgs),
    /// Tune the comment rule's parameters against the scenario objective.
    Adapt(RunArgs),
    /// Estimate hidden feedbacks, predict ahead and report the correction.
    Predict(RunArgs),
    /// Run with a frozen comment over state-driven sets and test for structure.
    Roulette(RunArgs),
    /// Run the comment rule over state-driven sets and test for structure.
    Oracle(RunArgs),
    /// Run two systems whose comments interact.
    Couple(RunArgs),
    /// Run several systems under one synthesized comment rule.
    Synthesize(RunArgs),
    /// Recover the block structure of a synthesized system.
    Localize(RunArgs),
    /// Re-run a manifest and compare its output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    /// Overrides the scenario seed and TACTICA_SEED.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Trace path; the report and manifest are written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    scenario: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Tsv,
}

impl From<Format> for TraceFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Jsonl => TraceFormat::Jsonl,
            Format::Tsv => TraceFormat::Tsv,
        }
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

pub fn report_path(out: &Path) -> PathBuf {
    sibling(out, "report.json")
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) | Error::Validation { .. } => EXIT_VALIDATION,
        Error::Numeric { .. } | Error::WindowNumeric { .. } => EXIT_NUMERIC,
        Error::Replay(_) => EXIT_REPLAY,
        Error::Io { .. } => EXIT_USAGE,
    }
}

/// Run with the process's standard streams and environment.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let env_seed = std::env::var(SEED_ENV).ok();
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(argv, env_seed.as_deref(), &mut stdout.lock(), &mut stderr.lock())
}

pub fn run<I, T>(argv: I, env_seed: Option<&str>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{text}");
                EXIT_USAGE
            } else {
                let _ = write!(out, "{text}");
                EXIT_OK
            };
        }
    };
    let (command, args) = match cli.command {
        Sub::Replay(a) => return replay(&a, out, err),
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Verbalize(a) => (Command::Verbalize, a),
        Sub::Tactical(a) => (Command::Tactical, a),
        Sub::Adapt(a) => (Command::Adapt, a),
        Sub::Predict(a) => (Command::Predict, a),
        Sub::Roulette(a) => (Command::Roulette, a),
        Sub::Oracle(a) => (Command::Oracle, a),
        Sub::Couple(a) => (Command::Couple, a),
        Sub::Synthesize(a) => (Command::Synthesize, a),
        Sub::Localize(a) => (Command::Localize, a),
    };
    let seed = match (args.seed, env_seed) {
        (Some(s), _) => Some(s),
        (None, Some(text)) => match text.trim().parse::<u64>() {
            Ok(s) => Some(s),
            Err(_) => {
                let _ = writeln!(err, "error: {SEED_ENV}=`{text}` is not an unsigned integer");
                return EXIT_USAGE;
            }
        },
        (None, None) => None,
    };
    let overrides = Overrides {
        seed,
        step: args.step,
        horizon: args.horizon,
    };
    match run_command(command, &args, &overrides, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn read(path: &Path) -> tactica::Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn run_command(command: Command, args: &RunArgs, overrides: &Overrides, out: &mut dyn Write) -> tactica::Result<()> {
    let text = read(&args.scenario)?;
    let scenario = load_scenario(&text, overrides)?;
    let output = execute(command, &scenario)?;
    for line in &output.summary {
        let _ = writeln!(out, "{line}");
    }
    if let Some(path) = &args.out {
        write_trace(&output.log, path, args.format.into())?;
        write_text(&report_path(path), &output.report_text())?;
        let manifest = RunManifest::for_run(command, &scenario, &output);
        write_text(&manifest_path(path), &manifest.to_text())?;
    }
    Ok(())
}

fn replay(args: &ReplayArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = read(&args.manifest)
        .and_then(|m| parse_manifest(&m))
        .and_then(|m| Ok((m, read(&args.scenario)?)))
        .and_then(|(m, s)| replay_run(&m, &s));
    match result {
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
        Ok(report) => {
            for name in &report.matches {
                let _ = writeln!(out, "match {name}");
            }
            for m in &report.mismatches {
                let _ = writeln!(out, "MISMATCH {} expected {} got {}", m.name, m.expected, m.actual);
            }
            if report.ok() {
                EXIT_OK
            } else {
                let _ = writeln!(err, "error: replay of `{}` differs in {} field(s)", report.command, report.mismatches.len());
                EXIT_REPLAY
            }
        }
    }
}
