use clap::Args;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{apply, csv_with_config, load_config, write_output, CommonArgs};
use crate::cts::MaskState;
use crate::error::{Error, Result};
use crate::nanoformer::{max_abs_logit_gap, NanoConfig, Nanoformer, TransformerParams};
use crate::seeds::stream_rng;

#[derive(Debug, Clone, Default, Args)]
pub struct CacheDemoArgs {
    /// Comma-separated layer counts.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub alphabet: Option<usize>,
    /// Random (weights, state) pairs per row.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Size of the refreshed set I.
    #[arg(long)]
    pub set_size: Option<usize>,
    /// Comma-separated fractions |A| / |I|.
    #[arg(long, value_delimiter = ',')]
    pub a_fractions: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheDemoConfig {
    pub seed: u64,
    pub layers: Vec<usize>,
    pub seq_len: usize,
    pub alphabet: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_ff: usize,
    pub trials: usize,
    pub set_size: usize,
    pub a_fractions: Vec<f64>,
}

impl Default for CacheDemoConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            layers: vec![1, 2, 3],
            seq_len: 16,
            alphabet: 8,
            d_model: 32,
            d_k: 16,
            d_ff: 64,
            trials: 50,
            set_size: 8,
            a_fractions: vec![0.0, 0.25, 0.5, 0.75],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CacheRow {
    pub layers: usize,
    pub a_fraction: f64,
    pub a_size: usize,
    pub set_size: usize,
    pub seq_len: usize,
    pub trials: usize,
    /// Mean over trials of the max-abs logit gap between the refreshed
    /// conditionals on B and a fresh full forward with A committed.
    pub mean_error: f64,
    pub max_error: f64,
    /// Same gap for the stale full-forward logits (no refresh).
    pub mean_stale_error: f64,
    /// Trials where refreshing strictly beat the stale logits.
    pub refresh_wins: usize,
    /// (full + partial attention FLOPs) / full attention FLOPs.
    pub flop_ratio: f64,
}

/// Errors and cost of refreshing one random (state, I, A) instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CacheTrial {
    pub refreshed_error: f64,
    pub stale_error: f64,
    pub flop_ratio: f64,
}

/// Draws a state with at least `set_size` masked positions, a refresh set
/// `I` of that size and `a_size` committed tokens, then compares the partial
/// forward against a fresh full forward on the state with `A` committed.
pub fn cache_trial<R: Rng + ?Sized>(model: &Nanoformer<f64>, set_size: usize, a_size: usize, rng: &mut R) -> Result<CacheTrial> {
    let cfg = model.config();
    let d = cfg.seq_len;
    let unmasked = rng.random_range(0..=d - set_size);
    let mut tokens = vec![None; d];
    for i in sample(rng, d, unmasked) {
        tokens[i] = Some(rng.random_range(0..cfg.alphabet));
    }
    let state = MaskState::from_tokens(tokens);
    let masked = state.masked();
    let set: Vec<usize> = sample(rng, masked.len(), set_size).into_iter().map(|j| masked[j]).collect();
    let committed: Vec<(usize, usize)> = set[..a_size].iter().map(|&i| (i, rng.random_range(0..cfg.alphabet))).collect();

    let (full, cache) = model.full_forward(&state);
    let partial = model.partial_forward(&cache, &state, &set, &committed)?;
    let (fresh, _) = model.full_forward(&state.with(&committed)?);
    let fresh_rows: Vec<Vec<f64>> = partial.positions.iter().map(|&i| fresh.logits.row(i).to_vec()).collect();
    let stale_rows: Vec<Vec<f64>> = partial.positions.iter().map(|&i| full.logits.row(i).to_vec()).collect();
    let stale = crate::nanoformer::Matrix { rows: stale_rows.len(), cols: cfg.alphabet, data: stale_rows.concat() };
    Ok(CacheTrial {
        refreshed_error: max_abs_logit_gap(&partial.logits, &fresh_rows),
        stale_error: max_abs_logit_gap(&stale, &fresh_rows),
        flop_ratio: (full.attention_flops + partial.attention_flops) as f64 / full.attention_flops as f64,
    })
}

fn validate(c: &CacheDemoConfig) -> Result<()> {
    if c.set_size == 0 || c.set_size > c.seq_len {
        return Err(Error::Argument(format!("set_size must lie in 1..={}, got {}", c.seq_len, c.set_size)));
    }
    if c.trials == 0 || c.layers.is_empty() || c.layers.contains(&0) {
        return Err(Error::Argument("need trials >= 1 and at least one positive layer count".into()));
    }
    if let Some(f) = c.a_fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(Error::Argument(format!("a_fractions must lie in [0, 1), got {f}")));
    }
    Ok(())
}

pub fn rows(c: &CacheDemoConfig) -> Result<Vec<CacheRow>> {
    validate(c)?;
    let mut out = Vec::new();
    for &layers in &c.layers {
        let cfg = NanoConfig {
            layers,
            d_model: c.d_model,
            d_k: c.d_k,
            d_ff: c.d_ff,
            alphabet: c.alphabet,
            seq_len: c.seq_len,
            ..NanoConfig::default()
        };
        cfg.validate()?;
        for &frac in &c.a_fractions {
            let a_size = ((frac * c.set_size as f64).round() as usize).min(c.set_size - 1);
            let key = format!("cache-demo/L{layers}/a{a_size}");
            let trials: Vec<CacheTrial> = (0..c.trials as u64)
                .into_par_iter()
                .map(|t| {
                    let mut rng = stream_rng(c.seed, &key, t);
                    let model = Nanoformer::new(TransformerParams::init(rng.random(), cfg)?);
                    cache_trial(&model, c.set_size, a_size, &mut rng)
                })
                .collect::<Result<_>>()?;
            let n = trials.len() as f64;
            out.push(CacheRow {
                layers,
                a_fraction: frac,
                a_size,
                set_size: c.set_size,
                seq_len: c.seq_len,
                trials: trials.len(),
                mean_error: trials.iter().map(|t| t.refreshed_error).sum::<f64>() / n,
                max_error: trials.iter().map(|t| t.refreshed_error).fold(0.0, f64::max),
                mean_stale_error: trials.iter().map(|t| t.stale_error).sum::<f64>() / n,
                refresh_wins: trials.iter().filter(|t| t.refreshed_error < t.stale_error).count(),
                flop_ratio: trials.iter().map(|t| t.flop_ratio).sum::<f64>() / n,
            });
        }
    }
    Ok(out)
}

pub fn resolve(common: &CommonArgs, args: &CacheDemoArgs) -> Result<CacheDemoConfig> {
    let mut c: CacheDemoConfig = load_config(common.config.as_deref())?;
    apply(&mut c.seed, common.seed);
    apply(&mut c.layers, args.layers.clone());
    apply(&mut c.seq_len, args.seq_len);
    apply(&mut c.alphabet, args.alphabet);
    apply(&mut c.trials, args.trials);
    apply(&mut c.set_size, args.set_size);
    apply(&mut c.a_fractions, args.a_fractions.clone());
    Ok(c)
}

pub fn run(common: &CommonArgs, args: &CacheDemoArgs) -> Result<()> {
    let config = resolve(common, args)?;
    let rows = rows(&config)?;
    write_output(common.out.as_deref(), &csv_with_config(&config, &rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_rows_and_costs() {
        let c = CacheDemoConfig { trials: 10, ..Default::default() };
        let rows = rows(&c).unwrap();
        assert_eq!(rows.len(), 12);
        for r in &rows {
            assert!((r.flop_ratio - (1.0 + 8.0 / 16.0)).abs() < 1e-12);
            if r.layers == 1 || r.a_size == 0 {
                assert!(r.max_error <= 1e-12, "{r:?}");
            }
        }
        let deep = rows.iter().find(|r| r.layers == 3 && r.a_size == 4).unwrap();
        assert!(deep.mean_error < deep.mean_stale_error);
    }
}
