//! Sweeps over (driver × policy × γ or α × steps) on a transformer-backed or
//! table-backed model.
//!
//! Replication `r` of a cell draws from the stream named by the cell key and
//! `r`, and per-cell statistics are reduced in replication order, so the
//! output does not depend on the worker count.

use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply, csv_with_config, load_config, write_output, CommonArgs};
use crate::cts::{run_cts, run_cts_cached, run_maskgit_chain, run_moment_chain_with, CacheSplit, GammaSchedule, GenerationTrace};
use crate::dist::ProductModel;
use crate::error::{Error, Result};
use crate::metrics::{compensated_sum, sequence_entropy, tv_empirical, tv_error_scale, EmpiricalPmf};
use crate::nanoformer::{NanoConfig, Nanoformer, TransformerParams};
use crate::oracle::JointTable;
use crate::policies::{
    ConfidencePolicy, Halton1dPolicy, Halton2dPolicy, HybridPolicy, MomentPolicy, OrderingPolicy, RandomPolicy,
};
use crate::schedules::{unmask_counts, ScheduleKind};
use crate::seeds::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Driver {
    Cts,
    CtsCached,
    MaskgitChain,
    MomentChain,
}

impl Driver {
    pub fn label(self) -> &'static str {
        match self {
            Driver::Cts => "cts",
            Driver::CtsCached => "cts-cached",
            Driver::MaskgitChain => "maskgit-chain",
            Driver::MomentChain => "moment-chain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PolicyName {
    Random,
    Confidence,
    Moment,
    Halton,
    Halton2d,
    Hybrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Transformer,
    Table,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long, value_delimiter = ',')]
    pub drivers: Option<Vec<Driver>>,
    #[arg(long, value_delimiter = ',')]
    pub policies: Option<Vec<PolicyName>>,
    #[arg(long, value_delimiter = ',')]
    pub gammas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    #[arg(long)]
    pub schedule: Option<ScheduleKind>,
    /// Generations per sweep cell.
    #[arg(long)]
    pub generations: Option<usize>,
    /// Sequence length D of the model.
    #[arg(long)]
    pub seq_len: Option<usize>,
    /// Alphabet size |S| of the model.
    #[arg(long)]
    pub alphabet: Option<usize>,
    /// Write generation traces as JSON to this file.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Worker threads (does not affect the output).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelKind,
    /// Transformer hyperparameters; `seq_len` and `alphabet` also size the
    /// random joint table of a table-backed run.
    pub transformer: NanoConfig,
    pub params_seed: u64,
    /// Load the joint table from this JointTable JSON instead of drawing one.
    pub table_path: Option<PathBuf>,
    pub drivers: Vec<Driver>,
    pub policies: Vec<PolicyName>,
    pub gammas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub steps: Vec<usize>,
    pub schedule: ScheduleKind,
    pub generations: usize,
    /// β of the fixed-exponent moment policy.
    pub moment_beta: f64,
    pub hybrid_explore: PolicyName,
    pub hybrid_exploit: PolicyName,
    /// Rows of the 2D Halton grid; columns are `D / rows`.
    pub halton_rows: Option<usize>,
    pub cache_split: CacheSplit,
    /// Moment orderings rank the last step without noise.
    pub final_deterministic: bool,
    /// Traces kept per cell when a trace file is requested.
    pub trace_count: usize,
    pub traces_out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelKind::Transformer,
            transformer: NanoConfig::default(),
            params_seed: 0,
            table_path: None,
            drivers: vec![Driver::Cts],
            policies: vec![PolicyName::Random, PolicyName::Confidence, PolicyName::Moment, PolicyName::Halton, PolicyName::Hybrid],
            gammas: vec![1.0, 2.0, 4.0],
            alphas: vec![6.0],
            steps: vec![8],
            schedule: ScheduleKind::Cosine,
            generations: 256,
            moment_beta: 2.0,
            hybrid_explore: PolicyName::Halton,
            hybrid_exploit: PolicyName::Confidence,
            halton_rows: None,
            cache_split: CacheSplit::HalfStep,
            final_deterministic: true,
            trace_count: 1,
            traces_out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub driver: &'static str,
    pub policy: String,
    pub steps: usize,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub generations: usize,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    /// Empirical TV between generated sequences and the joint table
    /// (table-backed runs only).
    pub tv_empirical: Option<f64>,
    /// `sqrt(|S|^D / generations)`, the scale of TV noise at this sample size.
    pub tv_noise_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub driver: &'static str,
    pub policy: String,
    pub steps: usize,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub replication: usize,
    pub trace: GenerationTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<ExperimentRow>,
    pub traces: Vec<TraceEntry>,
}

enum Backing {
    Transformer(Nanoformer<f64>),
    Table(JointTable),
}

impl Backing {
    fn model(&self) -> &(dyn ProductModel + Sync) {
        match self {
            Backing::Transformer(m) => m,
            Backing::Table(q) => q,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    driver: Driver,
    policy: Option<PolicyName>,
    steps: usize,
    gamma: Option<f64>,
    alpha: Option<f64>,
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::Argument(format!("config field `{field}`: {msg}"))
}

pub fn validate(c: &ExperimentConfig) -> Result<()> {
    c.transformer.validate().map_err(|e| invalid("transformer", e))?;
    let d = c.transformer.seq_len;
    if c.drivers.is_empty() {
        return Err(invalid("drivers", "at least one driver is required"));
    }
    if c.generations == 0 {
        return Err(invalid("generations", "must be at least 1"));
    }
    if c.steps.is_empty() {
        return Err(invalid("steps", "at least one step count is required"));
    }
    if let Some(s) = c.steps.iter().find(|&&s| s == 0 || s > d) {
        return Err(invalid("steps", format!("{s} is outside 1..={d}")));
    }
    let uses_cts = c.drivers.iter().any(|d| matches!(d, Driver::Cts | Driver::CtsCached));
    let uses_chain = c.drivers.iter().any(|d| matches!(d, Driver::MaskgitChain | Driver::MomentChain));
    if uses_cts && (c.policies.is_empty() || c.gammas.is_empty()) {
        return Err(invalid("policies", "cts drivers need at least one policy and one gamma"));
    }
    if let Some(g) = c.gammas.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
        return Err(invalid("gammas", format!("{g} is not a positive finite value")));
    }
    if uses_chain && c.alphas.is_empty() {
        return Err(invalid("alphas", "chain drivers need at least one alpha"));
    }
    if let Some(a) = c.alphas.iter().find(|a| !(**a >= 0.0)) {
        return Err(invalid("alphas", format!("{a} is negative")));
    }
    if c.drivers.contains(&Driver::MomentChain) && c.alphas.contains(&0.0) {
        return Err(invalid("alphas", "the moment chain needs alpha > 0"));
    }
    if !(c.moment_beta >= 1.0) {
        return Err(invalid("moment_beta", "must be at least 1"));
    }
    if c.drivers.contains(&Driver::CtsCached) && c.model != ModelKind::Transformer {
        return Err(invalid("drivers", "cts-cached needs the transformer model"));
    }
    if c.model == ModelKind::Table && c.table_path.is_none() {
        let size = (c.transformer.alphabet as f64).powi(d as i32);
        if size > crate::oracle::TABLE_LIMIT {
            return Err(invalid("transformer.seq_len", format!("a joint table over {size} sequences is too large")));
        }
    }
    let needs_grid = c.policies.contains(&PolicyName::Halton2d)
        || (c.policies.contains(&PolicyName::Hybrid)
            && (c.hybrid_explore == PolicyName::Halton2d || c.hybrid_exploit == PolicyName::Halton2d));
    if needs_grid {
        match c.halton_rows {
            Some(r) if r > 0 && d.is_multiple_of(r) => {}
            _ => return Err(invalid("halton_rows", format!("must divide the sequence length {d}"))),
        }
    }
    for side in [c.hybrid_explore, c.hybrid_exploit] {
        if side == PolicyName::Hybrid {
            return Err(invalid("hybrid_explore", "hybrid policies cannot nest"));
        }
    }
    Ok(())
}

fn build_policy(name: PolicyName, c: &ExperimentConfig) -> Box<dyn OrderingPolicy> {
    match name {
        PolicyName::Random => Box::new(RandomPolicy),
        PolicyName::Confidence => Box::new(ConfidencePolicy),
        PolicyName::Moment => Box::new(MomentPolicy { final_deterministic: c.final_deterministic, ..MomentPolicy::fixed(c.moment_beta) }),
        PolicyName::Halton => Box::new(Halton1dPolicy),
        PolicyName::Halton2d => {
            let rows = c.halton_rows.expect("validated");
            Box::new(Halton2dPolicy { rows, cols: c.transformer.seq_len / rows })
        }
        PolicyName::Hybrid => Box::new(HybridPolicy {
            explore: build_policy(c.hybrid_explore, c),
            exploit: build_policy(c.hybrid_exploit, c),
        }),
    }
}

fn cells(c: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &driver in &c.drivers {
        for &steps in &c.steps {
            match driver {
                Driver::Cts | Driver::CtsCached => {
                    for &p in &c.policies {
                        for &g in &c.gammas {
                            out.push(Cell { driver, policy: Some(p), steps, gamma: Some(g), alpha: None });
                        }
                    }
                }
                Driver::MaskgitChain | Driver::MomentChain => {
                    for &a in &c.alphas {
                        out.push(Cell { driver, policy: None, steps, gamma: None, alpha: Some(a) });
                    }
                }
            }
        }
    }
    out
}

fn policy_label(cell: &Cell, c: &ExperimentConfig) -> String {
    match (cell.policy, cell.driver) {
        (Some(p), _) => build_policy(p, c).name(),
        (None, Driver::MaskgitChain) => "maskgit".into(),
        (None, _) => "moment-scheduled".into(),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

fn run_cell(c: &ExperimentConfig, backing: &Backing, cell: &Cell) -> Result<Vec<GenerationTrace>> {
    let label = policy_label(cell, c);
    let key = format!(
        "cts-experiment/{}/{}/steps={}/gamma={}/alpha={}",
        cell.driver.label(),
        label,
        cell.steps,
        fmt_opt(cell.gamma),
        fmt_opt(cell.alpha)
    );
    let schedule = unmask_counts(c.schedule, c.transformer.seq_len, cell.steps)?;
    (0..c.generations as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(c.seed, &key, r);
            let model = backing.model();
            match cell.driver {
                Driver::Cts => {
                    let mut policy = build_policy(cell.policy.expect("cts cell"), c);
                    let gamma = GammaSchedule::Constant(cell.gamma.expect("cts cell"));
                    run_cts(model, policy.as_mut(), &schedule, &gamma, &mut rng)
                }
                Driver::CtsCached => {
                    let Backing::Transformer(net) = backing else {
                        return Err(invalid("drivers", "cts-cached needs the transformer model"));
                    };
                    let mut policy = build_policy(cell.policy.expect("cts cell"), c);
                    let gamma = GammaSchedule::Constant(cell.gamma.expect("cts cell"));
                    run_cts_cached(net, policy.as_mut(), &schedule, &gamma, c.cache_split, &mut rng)
                }
                Driver::MaskgitChain => run_maskgit_chain(model, &schedule, cell.alpha.expect("chain cell"), &mut rng),
                Driver::MomentChain => run_moment_chain_with(model, &schedule, cell.alpha.expect("chain cell"), c.final_deterministic, &mut rng),
            }
        })
        .collect()
}

fn load_backing(c: &ExperimentConfig) -> Result<Backing> {
    match c.model {
        ModelKind::Transformer => {
            Ok(Backing::Transformer(Nanoformer::new(TransformerParams::init(c.params_seed, c.transformer)?)))
        }
        ModelKind::Table => {
            let q = match &c.table_path {
                Some(p) => JointTable::load(p)?,
                None => {
                    let mut rng = stream_rng(c.seed, "cts-experiment/table", 0);
                    JointTable::random(c.transformer.seq_len, c.transformer.alphabet, &mut rng)?
                }
            };
            if q.seq_len != c.transformer.seq_len || q.alphabet_size != c.transformer.alphabet {
                return Err(invalid("table_path", "table dimensions differ from transformer.seq_len/alphabet"));
            }
            Ok(Backing::Table(q))
        }
    }
}

fn summarize(c: &ExperimentConfig, backing: &Backing, cell: &Cell, traces: &[GenerationTrace]) -> ExperimentRow {
    let entropies: Vec<f64> = traces.iter().map(|t| sequence_entropy(&t.tokens)).collect();
    let n = entropies.len() as f64;
    let mean = compensated_sum(entropies.iter().copied()) / n;
    let var = if entropies.len() > 1 {
        compensated_sum(entropies.iter().map(|e| (e - mean) * (e - mean))) / (n - 1.0)
    } else {
        0.0
    };
    let (tv, scale) = match backing {
        Backing::Table(q) => {
            let emp: EmpiricalPmf<Vec<usize>> = traces.iter().map(|t| t.tokens.clone()).collect();
            (Some(tv_empirical(&emp, &q.to_pmf())), Some(tv_error_scale(q.probs.len(), emp.total())))
        }
        Backing::Transformer(_) => (None, None),
    };
    ExperimentRow {
        driver: cell.driver.label(),
        policy: policy_label(cell, c),
        steps: cell.steps,
        gamma: cell.gamma,
        alpha: cell.alpha,
        generations: traces.len(),
        entropy_mean: mean,
        entropy_std: var.sqrt(),
        tv_empirical: tv,
        tv_noise_scale: scale,
    }
}

fn row_order(a: &ExperimentRow, b: &ExperimentRow) -> std::cmp::Ordering {
    let key = |r: &ExperimentRow| (r.driver, r.policy.clone(), r.steps);
    key(a)
        .cmp(&key(b))
        .then(a.gamma.unwrap_or(f64::NAN).total_cmp(&b.gamma.unwrap_or(f64::NAN)))
        .then(a.alpha.unwrap_or(f64::NAN).total_cmp(&b.alpha.unwrap_or(f64::NAN)))
}

/// Runs the sweep in the current rayon pool.
pub fn execute(c: &ExperimentConfig) -> Result<ExperimentOutput> {
    validate(c)?;
    let backing = load_backing(c)?;
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for cell in cells(c) {
        let generated = run_cell(c, &backing, &cell)?;
        let row = summarize(c, &backing, &cell, &generated);
        for (replication, trace) in generated.into_iter().take(c.trace_count).enumerate() {
            traces.push(TraceEntry {
                driver: row.driver,
                policy: row.policy.clone(),
                steps: row.steps,
                gamma: row.gamma,
                alpha: row.alpha,
                replication,
                trace,
            });
        }
        rows.push(row);
    }
    rows.sort_by(row_order);
    traces.sort_by(|a, b| {
        let ka = (a.driver, a.policy.clone(), a.steps);
        let kb = (b.driver, b.policy.clone(), b.steps);
        ka.cmp(&kb)
            .then(a.gamma.unwrap_or(f64::NAN).total_cmp(&b.gamma.unwrap_or(f64::NAN)))
            .then(a.alpha.unwrap_or(f64::NAN).total_cmp(&b.alpha.unwrap_or(f64::NAN)))
            .then(a.replication.cmp(&b.replication))
    });
    Ok(ExperimentOutput { rows, traces })
}

/// Runs the sweep on a dedicated pool of `threads` workers.
pub fn execute_with_threads(c: &ExperimentConfig, threads: usize) -> Result<ExperimentOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Argument(format!("cannot build a pool of {threads} threads: {e}")))?;
    pool.install(|| execute(c))
}

pub fn csv_text(c: &ExperimentConfig, out: &ExperimentOutput) -> Result<String> {
    csv_with_config(c, &out.rows)
}

pub fn traces_json(c: &ExperimentConfig, out: &ExperimentOutput) -> Result<String> {
    Ok(serde_json::to_string_pretty(&serde_json::json!({ "config": c, "traces": out.traces }))? + "\n")
}

pub fn resolve(common: &CommonArgs, args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut c: ExperimentConfig = load_config(common.config.as_deref())?;
    apply(&mut c.seed, common.seed);
    apply(&mut c.model, args.model);
    apply(&mut c.drivers, args.drivers.clone());
    apply(&mut c.policies, args.policies.clone());
    apply(&mut c.gammas, args.gammas.clone());
    apply(&mut c.alphas, args.alphas.clone());
    apply(&mut c.steps, args.steps.clone());
    apply(&mut c.schedule, args.schedule);
    apply(&mut c.generations, args.generations);
    apply(&mut c.transformer.seq_len, args.seq_len);
    apply(&mut c.transformer.alphabet, args.alphabet);
    if args.traces.is_some() {
        c.traces_out = args.traces.clone();
    }
    Ok(c)
}

pub fn run(common: &CommonArgs, args: &ExperimentArgs) -> Result<()> {
    let config = resolve(common, args)?;
    let output = match args.threads {
        Some(t) => execute_with_threads(&config, t)?,
        None => execute(&config)?,
    };
    write_output(common.out.as_deref(), &csv_text(&config, &output)?)?;
    if let Some(path) = &config.traces_out {
        std::fs::write(path, traces_json(&config, &output)?)?;
    }
    Ok(())
}
