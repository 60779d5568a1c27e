use clap::Args;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply, csv_with_config, load_config, write_output, CommonArgs};
use crate::dist::Categorical;
use crate::error::{Error, Result};
use crate::metrics::{tv_empirical, tv_exact, EmpiricalPmf};
use crate::rounds::{beta_from_alpha, maskgit_round, maskgit_round_exact_pmf, moment_round_exact_pmf, tv_theorem_bound};
use crate::seeds::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TvMode {
    Exact,
    Montecarlo,
}

impl TvMode {
    fn label(self) -> &'static str {
        match self {
            TvMode::Exact => "exact",
            TvMode::Montecarlo => "montecarlo",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TvCurveArgs {
    /// Tokens unmasked per round.
    #[arg(long)]
    pub k: Option<usize>,
    /// Alphabet size |S|.
    #[arg(long)]
    pub alphabet: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated numbers of masked positions N.
    #[arg(long, value_delimiter = ',')]
    pub n: Option<Vec<usize>>,
    #[arg(long)]
    pub mode: Option<TvMode>,
    /// Monte Carlo draws per row.
    #[arg(long)]
    pub draws: Option<u64>,
    /// Number of random base distributions cycled over the positions.
    #[arg(long)]
    pub bases: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvCurveConfig {
    pub seed: u64,
    pub k: usize,
    pub alphabet: usize,
    pub alpha: f64,
    pub n: Vec<usize>,
    pub mode: TvMode,
    pub draws: u64,
    pub bases: usize,
}

impl Default for TvCurveConfig {
    fn default() -> Self {
        Self { seed: 0, k: 1, alphabet: 2, alpha: 1.0, n: vec![4, 8, 12, 16], mode: TvMode::Exact, draws: 1_000_000, bases: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TvRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub tv: f64,
    pub bound: f64,
    pub mode: &'static str,
    pub draws: u64,
}

/// Position `i` of an `N`-position instance carries base distribution
/// `i mod bases`, so the instances for different `N` share their makeup.
pub fn instance(config: &TvCurveConfig, n: usize) -> Vec<Categorical> {
    let mut rng = stream_rng(config.seed, "tv-curve/bases", 0);
    let bases: Vec<Categorical> = (0..config.bases).map(|_| Categorical::random(config.alphabet, &mut rng)).collect();
    (0..n).map(|i| bases[i % bases.len()].clone()).collect()
}

fn validate(config: &TvCurveConfig) -> Result<()> {
    if config.k == 0 || config.alphabet == 0 || config.bases == 0 {
        return Err(Error::Argument("k, alphabet and bases must be at least 1".into()));
    }
    if !(config.alpha > 0.0) {
        return Err(Error::Argument(format!("alpha must be positive, got {}", config.alpha)));
    }
    if config.mode == TvMode::Montecarlo && config.draws == 0 {
        return Err(Error::Argument("montecarlo mode needs draws >= 1".into()));
    }
    Ok(())
}

fn row(config: &TvCurveConfig, n: usize) -> Result<TvRow> {
    let ps = instance(config, n);
    let beta = beta_from_alpha(config.alpha);
    let moment = moment_round_exact_pmf(&ps, config.k, config.alpha, beta)?;
    let (tv, draws) = match config.mode {
        TvMode::Exact => (tv_exact(&maskgit_round_exact_pmf(&ps, config.k, config.alpha)?, &moment), 0),
        TvMode::Montecarlo => {
            let mut rng = stream_rng(config.seed, "tv-curve/draws", n as u64);
            let mut emp = EmpiricalPmf::new();
            for _ in 0..config.draws {
                emp.record(maskgit_round(&ps, config.k, config.alpha, &mut rng)?);
            }
            (tv_empirical(&emp, &moment), config.draws)
        }
    };
    Ok(TvRow { n, tv, bound: tv_theorem_bound(n, config.k, config.alphabet, config.alpha), mode: config.mode.label(), draws })
}

/// One row per admissible `N`, sorted by `N`. Rows whose enumeration would
/// exceed a guard are reported on stderr and skipped.
pub fn rows(config: &TvCurveConfig) -> Result<Vec<TvRow>> {
    validate(config)?;
    let mut ns = config.n.clone();
    ns.sort_unstable();
    ns.dedup();
    let results: Vec<(usize, Result<TvRow>)> = ns.par_iter().map(|&n| (n, row(config, n))).collect();
    let mut out = Vec::new();
    for (n, r) in results {
        match r {
            Ok(row) => out.push(row),
            Err(e @ Error::Capacity { .. }) | Err(e @ Error::Argument(_)) => eprintln!("skipping N = {n}: {e}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

pub fn resolve(common: &CommonArgs, args: &TvCurveArgs) -> Result<TvCurveConfig> {
    let mut c: TvCurveConfig = load_config(common.config.as_deref())?;
    apply(&mut c.seed, common.seed);
    apply(&mut c.k, args.k);
    apply(&mut c.alphabet, args.alphabet);
    apply(&mut c.alpha, args.alpha);
    apply(&mut c.n, args.n.clone());
    apply(&mut c.mode, args.mode);
    apply(&mut c.draws, args.draws);
    apply(&mut c.bases, args.bases);
    Ok(c)
}

pub fn run(common: &CommonArgs, args: &TvCurveArgs) -> Result<()> {
    let config = resolve(common, args)?;
    let rows = rows(&config)?;
    write_output(common.out.as_deref(), &csv_with_config(&config, &rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_curve_decreases_under_bound() {
        let r = rows(&TvCurveConfig::default()).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.windows(2).all(|w| w[1].tv < w[0].tv));
        assert!(r.iter().all(|row| row.tv <= row.bound.min(1.0)));
    }

    #[test]
    fn bound_is_five_at_threshold() {
        // N = k² |S|^{1/α} = 4 · 2 = 8 for k = 2, |S| = 4, α = 2.
        let c = TvCurveConfig { k: 2, alphabet: 4, alpha: 2.0, n: vec![8], ..Default::default() };
        let r = rows(&c).unwrap();
        assert!((r[0].bound - 5.0).abs() < 1e-12);
    }

    #[test]
    fn guarded_rows_are_skipped() {
        let c = TvCurveConfig { n: vec![4, 40], ..Default::default() };
        let r = rows(&c).unwrap();
        assert_eq!(r.iter().map(|r| r.n).collect::<Vec<_>>(), vec![4]);
    }
}
