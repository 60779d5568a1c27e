//! Command-line harness: verification suites and reproducible experiment
//! sweeps writing CSV/JSON artifacts.
//!
//! Every command resolves its configuration from built-in defaults, then an
//! optional JSON file (`--config`), then explicit flags. The resolved config
//! is embedded in each output file.

pub mod cache_demo;
pub mod experiment;
pub mod schedule_dump;
pub mod tv_curve;
pub mod verify;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "mdsampler", version, about = "Masked-diffusion samplers and their exact oracles")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file (stdout when omitted).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// JSON config file; explicit flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run property suites and print a pass/fail table.
    Verify(verify::VerifyArgs),
    /// Exact or Monte Carlo TV between MaskGIT and moment rounds against N.
    TvCurve(tv_curve::TvCurveArgs),
    /// Sweep policies, temperatures and step counts; report diversity and TV.
    CtsExperiment(experiment::ExperimentArgs),
    /// Partial KV caching error and attention cost against a fresh forward.
    CacheDemo(cache_demo::CacheDemoArgs),
    /// Print the unmasking schedule, half steps and temperatures.
    ScheduleDump(schedule_dump::ScheduleDumpArgs),
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Verify(a) => verify::run(&cli.common, a),
        Command::TvCurve(a) => tv_curve::run(&cli.common, a).map(|_| EXIT_OK),
        Command::CtsExperiment(a) => experiment::run(&cli.common, a).map(|_| EXIT_OK),
        Command::CacheDemo(a) => cache_demo::run(&cli.common, a).map(|_| EXIT_OK),
        Command::ScheduleDump(a) => schedule_dump::run(&cli.common, a).map(|_| EXIT_OK),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Argument(_) | Error::Format(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

/// Loads a command config from `path`, or the defaults when absent.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Argument(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("config {}: {e}", p.display())))
        }
    }
}

/// Overwrites `slot` with an explicit flag value.
pub fn apply<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// CSV text: a `# config:` line with the compact JSON of `config`, a header
/// row and one row per record.
pub fn csv_with_config<C: Serialize, R: Serialize>(config: &C, rows: &[R]) -> Result<String> {
    let mut out = format!("# config: {}\n", serde_json::to_string(config)?);
    out.push_str(&csv_rows(rows)?);
    Ok(out)
}

/// The header and data rows only.
pub fn csv_rows<R: Serialize>(rows: &[R]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

/// Strips `# ` comment lines, leaving the RFC-4180 body.
pub fn csv_body(text: &str) -> String {
    text.split_inclusive('\n').filter(|l| !l.starts_with('#')).collect()
}

pub fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}
