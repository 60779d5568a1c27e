use clap::Args;
use serde::{Deserialize, Serialize};

use super::{apply, csv_with_config, load_config, write_output, CommonArgs};
use crate::error::{Error, Result};
use crate::schedules::{hybrid_m, schedule_rows, unmask_counts, ScheduleKind};

#[derive(Debug, Clone, Default, Args)]
pub struct ScheduleDumpArgs {
    #[arg(long)]
    pub kind: Option<ScheduleKind>,
    /// Sequence length D.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Number of steps N.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Base Gumbel temperature α.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// `csv` or `json`.
    #[arg(long)]
    pub format: Option<OutputFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleDumpConfig {
    pub seed: u64,
    pub kind: ScheduleKind,
    pub seq_len: usize,
    pub steps: usize,
    pub alpha: f64,
    pub format: OutputFormat,
}

impl Default for ScheduleDumpConfig {
    fn default() -> Self {
        Self { seed: 0, kind: ScheduleKind::Cosine, seq_len: 256, steps: 16, alpha: 6.0, format: OutputFormat::Csv }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpRow {
    pub n: usize,
    pub unmasked: usize,
    pub round_size: usize,
    pub half_step: usize,
    pub temperature: f64,
    pub hybrid_m: usize,
}

pub fn rows(config: &ScheduleDumpConfig) -> Result<Vec<DumpRow>> {
    if !(config.alpha >= 0.0) {
        return Err(Error::Argument(format!("alpha must be non-negative, got {}", config.alpha)));
    }
    let schedule = unmask_counts(config.kind, config.seq_len, config.steps)?;
    Ok(schedule_rows(&schedule, config.alpha)
        .into_iter()
        .map(|r| DumpRow {
            n: r.n,
            unmasked: r.unmasked,
            round_size: r.round_size,
            half_step: r.half_step,
            temperature: r.temperature,
            hybrid_m: hybrid_m(r.n, config.steps, r.round_size),
        })
        .collect())
}

pub fn resolve(common: &CommonArgs, args: &ScheduleDumpArgs) -> Result<ScheduleDumpConfig> {
    let mut c: ScheduleDumpConfig = load_config(common.config.as_deref())?;
    apply(&mut c.seed, common.seed);
    apply(&mut c.kind, args.kind);
    apply(&mut c.seq_len, args.seq_len);
    apply(&mut c.steps, args.steps);
    apply(&mut c.alpha, args.alpha);
    apply(&mut c.format, args.format);
    Ok(c)
}

pub fn run(common: &CommonArgs, args: &ScheduleDumpArgs) -> Result<()> {
    let config = resolve(common, args)?;
    let rows = rows(&config)?;
    let text = match config.format {
        OutputFormat::Csv => csv_with_config(&config, &rows)?,
        OutputFormat::Json => {
            serde_json::to_string_pretty(&serde_json::json!({ "config": config, "rows": rows }))? + "\n"
        }
    };
    write_output(common.out.as_deref(), &text)
}
