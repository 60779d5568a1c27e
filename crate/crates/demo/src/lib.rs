//! Browser bindings for a few `mdsampler` operations.
//!
//! Each export returns a JSON string so the page can stay plain JavaScript.
//! The `*_json` functions hold the logic and are what the native tests call;
//! the `#[wasm_bindgen]` wrappers translate errors into `JsError` and take
//! 32-bit seeds so JavaScript can pass plain numbers.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use mdsampler::cli::schedule_dump::{self, ScheduleDumpConfig};
use mdsampler::cli::tv_curve::{instance, TvCurveConfig};
use mdsampler::gumbel::{gumbel_top_k, ordered_prefixes, top_k_prefix_pmf};
use mdsampler::metrics::{tv_empirical, tv_exact, EmpiricalPmf, Pmf};
use mdsampler::rounds::{beta_from_alpha, maskgit_round_exact_pmf, moment_round_exact_pmf, tv_theorem_bound};
use mdsampler::seeds::stream_rng;
use mdsampler::ScheduleKind;
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Largest number of ordered prefixes the Gumbel explorer will tabulate.
pub const MAX_PREFIXES: usize = 5_040;
/// Upper limit on Monte Carlo draws per call, to keep the page responsive.
pub const MAX_DRAWS: u32 = 2_000_000;

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("cannot parse {what} entry '{s}'")))
        .collect()
}

/// Samples Gumbel-top-k over `logits` `draws` times and tabulates every
/// ordered prefix against its exact probability.
pub fn gumbel_explorer_json(logits: &str, k: usize, draws: u32, seed: u64) -> Result<String, String> {
    let mu: Vec<f64> = parse_list(logits, "logit")?;
    if mu.iter().any(|m| !m.is_finite()) {
        return Err("logits must be finite".into());
    }
    if k == 0 || k > mu.len() {
        return Err(format!("k must lie in 1..={}", mu.len()));
    }
    let prefixes = ordered_prefixes(mu.len(), k);
    if prefixes.len() > MAX_PREFIXES {
        return Err(format!("{} ordered prefixes exceed the display limit of {MAX_PREFIXES}", prefixes.len()));
    }
    if draws == 0 || draws > MAX_DRAWS {
        return Err(format!("draws must lie in 1..={MAX_DRAWS}"));
    }
    let mut rng = stream_rng(seed, "demo/gumbel", 0);
    let mut emp = EmpiricalPmf::new();
    for _ in 0..draws {
        emp.record(gumbel_top_k(&mu, k, 1.0, &mut rng).map_err(|e| e.to_string())?.indices);
    }
    let mut exact = Vec::with_capacity(prefixes.len());
    let mut rows = Vec::with_capacity(prefixes.len());
    for p in prefixes {
        let prob = top_k_prefix_pmf(&mu, &p).map_err(|e| e.to_string())?;
        rows.push(json!({
            "prefix": p,
            "exact": prob,
            "empirical": emp.count(&p) as f64 / draws as f64,
        }));
        exact.push((p, prob));
    }
    let q: Pmf<Vec<usize>> = exact.into_iter().collect();
    Ok(json!({ "draws": draws, "tv": tv_empirical(&emp, &q), "rows": rows }).to_string())
}

/// Exact TV distance between one MaskGIT round and one moment round, next to
/// the closed-form bound, for each `N` in `ns`.
pub fn tv_curve_json(k: usize, alphabet: usize, alpha: f64, ns: &str, seed: u64) -> Result<String, String> {
    if !(alpha > 0.0) || alphabet < 2 || k == 0 {
        return Err("need alpha > 0, alphabet >= 2 and k >= 1".into());
    }
    let mut ns: Vec<usize> = parse_list(ns, "N")?;
    ns.sort_unstable();
    ns.dedup();
    let config = TvCurveConfig { seed, k, alphabet, alpha, ..TvCurveConfig::default() };
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for n in ns {
        let ps = instance(&config, n);
        let tv = maskgit_round_exact_pmf(&ps, k, alpha)
            .and_then(|m| Ok(tv_exact(&m, &moment_round_exact_pmf(&ps, k, alpha, beta_from_alpha(alpha))?)));
        match tv {
            Ok(tv) => rows.push(json!({ "N": n, "tv": tv, "bound": tv_theorem_bound(n, k, alphabet, alpha) })),
            Err(e) => skipped.push(json!({ "N": n, "reason": e.to_string() })),
        }
    }
    Ok(json!({ "rows": rows, "skipped": skipped }).to_string())
}

/// Unmasking schedule with per-step temperature and hybrid split.
pub fn schedule_json(kind: &str, seq_len: usize, steps: usize, alpha: f64) -> Result<String, String> {
    let kind: ScheduleKind = kind.parse().map_err(|e: mdsampler::Error| e.to_string())?;
    let config = ScheduleDumpConfig { kind, seq_len, steps, alpha, ..ScheduleDumpConfig::default() };
    let rows = schedule_dump::rows(&config).map_err(|e| e.to_string())?;
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = gumbelExplorer)]
pub fn gumbel_explorer(logits: &str, k: usize, draws: u32, seed: u32) -> Result<String, JsError> {
    js(gumbel_explorer_json(logits, k, draws, seed.into()))
}

#[wasm_bindgen(js_name = tvCurve)]
pub fn tv_curve(k: usize, alphabet: usize, alpha: f64, ns: &str, seed: u32) -> Result<String, JsError> {
    js(tv_curve_json(k, alphabet, alpha, ns, seed.into()))
}

#[wasm_bindgen(js_name = schedule)]
pub fn schedule(kind: &str, seq_len: usize, steps: usize, alpha: f64) -> Result<String, JsError> {
    js(schedule_json(kind, seq_len, steps, alpha))
}
