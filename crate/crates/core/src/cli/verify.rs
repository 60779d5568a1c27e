//! Property suites runnable from the command line. Each check draws from its
//! own named stream of the master seed.

use std::time::Instant;

use clap::Args;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{write_output, CommonArgs, EXIT_FAILURE, EXIT_OK};
use crate::cts::MaskState;
use crate::dist::{Categorical, ProductModel};
use crate::error::{Error, Result};
use crate::gumbel::{gumbel_top_k, ordered_prefixes, top_k_prefix_pmf};
use crate::metrics::{sequence_entropy, tv_empirical, tv_exact, EmpiricalPmf, Pmf};
use crate::nanoformer::{max_abs_logit_gap, NanoConfig, Nanoformer, TransformerParams};
use crate::oracle::{
    exact_cts_distribution, kl_decomposition_terms, term_b_subset_enumeration, ConfidenceKernel, JointTable,
    UniformKernel,
};
use crate::policies::{merge_orderings, order_halton_1d, order_halton_2d, UnmaskOrder};
use crate::rounds::{
    maskgit_round_exact_pmf, moment_round, moment_round_exact_pmf, token_law_given_selected, tv_theorem_bound,
    unordered_pmf,
};
use crate::schedules::{gumbel_temp, unmask_counts, ScheduleKind};
use crate::seeds::stream_rng;

pub const SUITES: [&str; 7] = ["gumbel", "rounds", "oracle", "nanoformer", "policies", "schedules", "metrics"];

#[derive(Debug, Clone, Default, Args)]
pub struct VerifyArgs {
    /// Suites to run (repeatable or comma-separated); all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub suite: Vec<String>,
}

type CheckResult = std::result::Result<String, String>;
type CheckFn = fn(&mut ChaCha8Rng) -> CheckResult;

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub suite: &'static str,
    pub check: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn ensure(ok: bool, detail: String) -> CheckResult {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn lift<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random_mu(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| 3.0 * rng.random::<f64>() - 1.5).collect()
}

fn random_ps(n: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<Categorical> {
    (0..n).map(|_| Categorical::random(s, rng)).collect()
}

// --- gumbel ---

fn gumbel_normalization(rng: &mut ChaCha8Rng) -> CheckResult {
    let mu = random_mu(6, rng);
    let total: f64 = ordered_prefixes(6, 3).iter().map(|p| top_k_prefix_pmf(&mu, p).unwrap()).sum();
    ensure((total - 1.0).abs() < 1e-12, format!("sum over prefixes = {total}"))
}

fn gumbel_monte_carlo(rng: &mut ChaCha8Rng) -> CheckResult {
    let mu = random_mu(5, rng);
    let exact: Pmf<Vec<usize>> =
        ordered_prefixes(5, 3).into_iter().map(|p| (p.clone(), top_k_prefix_pmf(&mu, &p).unwrap())).collect();
    let emp: EmpiricalPmf<Vec<usize>> =
        (0..300_000).map(|_| gumbel_top_k(&mu, 3, 1.0, rng).unwrap().indices).collect();
    let tv = tv_empirical(&emp, &exact);
    ensure(tv < 0.015, format!("TV = {tv:.5} at 3e5 draws"))
}

fn gumbel_shift_invariance(rng: &mut ChaCha8Rng) -> CheckResult {
    let mu = random_mu(5, rng);
    let shifted: Vec<f64> = mu.iter().map(|m| m + 7.25).collect();
    let worst = ordered_prefixes(5, 2)
        .iter()
        .map(|p| (top_k_prefix_pmf(&mu, p).unwrap() - top_k_prefix_pmf(&shifted, p).unwrap()).abs())
        .fold(0.0, f64::max);
    ensure(worst < 1e-12, format!("max gap {worst:.2e}"))
}

// --- rounds ---

fn rounds_exact_normalize(rng: &mut ChaCha8Rng) -> CheckResult {
    let ps = random_ps(5, 3, rng);
    let a: f64 = lift(maskgit_round_exact_pmf(&ps, 2, 1.5))?.values().sum();
    let b: f64 = lift(moment_round_exact_pmf(&ps, 2, 1.5, 1.0))?.values().sum();
    ensure((a - 1.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12, format!("masses {a}, {b}"))
}

fn rounds_moment_monte_carlo(rng: &mut ChaCha8Rng) -> CheckResult {
    let ps = random_ps(6, 3, rng);
    let exact = lift(moment_round_exact_pmf(&ps, 2, 1.0, 2.0))?;
    let emp: EmpiricalPmf<_> = (0..300_000).map(|_| moment_round(&ps, 2, 1.0, 2.0, rng).unwrap()).collect();
    let tv = tv_empirical(&emp, &exact);
    ensure(tv < 0.03, format!("TV = {tv:.5} at 3e5 draws over {} outcomes", exact.len()))
}

fn rounds_unbiased_marginals(rng: &mut ChaCha8Rng) -> CheckResult {
    let ps = random_ps(4, 3, rng);
    let pmf = lift(moment_round_exact_pmf(&ps, 2, 2.0, 1.0))?;
    let mut worst: f64 = 0.0;
    for (i, p) in ps.iter().enumerate() {
        let law = token_law_given_selected(&pmf, i, 3).ok_or("position never selected")?;
        worst = law.iter().zip(p.probs()).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    ensure(worst < 1e-12, format!("max marginal gap {worst:.2e}"))
}

fn rounds_full_selection_product(rng: &mut ChaCha8Rng) -> CheckResult {
    let ps = random_ps(3, 2, rng);
    let unordered = unordered_pmf(&lift(maskgit_round_exact_pmf(&ps, 3, 0.8))?);
    let worst = unordered
        .iter()
        .map(|(pairs, p)| (p - pairs.iter().map(|&(i, z)| ps[i].prob(z)).product::<f64>()).abs())
        .fold(0.0, f64::max);
    ensure(worst < 1e-12, format!("max gap to product law {worst:.2e}"))
}

fn rounds_tv_trend(rng: &mut ChaCha8Rng) -> CheckResult {
    let base = random_ps(4, 2, rng);
    let mut tvs = Vec::new();
    for n in [4, 8, 12] {
        let ps: Vec<Categorical> = (0..n).map(|i| base[i % 4].clone()).collect();
        let tv = tv_exact(&lift(maskgit_round_exact_pmf(&ps, 1, 1.0))?, &lift(moment_round_exact_pmf(&ps, 1, 1.0, 2.0))?);
        if tv > tv_theorem_bound(n, 1, 2, 1.0).min(1.0) {
            return Err(format!("TV {tv} above bound at N = {n}"));
        }
        tvs.push(tv);
    }
    ensure(tvs.windows(2).all(|w| w[1] < w[0]), format!("TV by N: {tvs:?}"))
}

// --- oracle ---

fn oracle_cts_unbiased(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let q = lift(JointTable::random(3, 2, rng))?;
        for tv in [
            tv_exact(&lift(exact_cts_distribution(&q, &UniformKernel, 1.0))?, &q.to_pmf()),
            tv_exact(&lift(exact_cts_distribution(&q, &ConfidenceKernel { sharpness: 4.0 }, 1.0))?, &q.to_pmf()),
        ] {
            worst = worst.max(tv);
        }
    }
    ensure(worst < 1e-10, format!("max TV {worst:.2e}"))
}

fn oracle_tempering_biases(rng: &mut ChaCha8Rng) -> CheckResult {
    let q = lift(JointTable::random(3, 2, rng))?;
    let tv = tv_exact(&lift(exact_cts_distribution(&q, &UniformKernel, 2.0))?, &q.to_pmf());
    ensure(tv > 0.01, format!("TV at gamma 2 = {tv:.4}"))
}

fn oracle_kl_ledger(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst_chain: f64 = 0.0;
    let mut worst_b: f64 = 0.0;
    for _ in 0..20 {
        let q = lift(JointTable::random(4, 2, rng))?;
        let t = lift(kl_decomposition_terms(&q, &[0, 2]))?;
        worst_chain = worst_chain.max((t.chain_lhs - t.chain_rhs1 - t.chain_rhs2).abs());
        worst_b = worst_b.max((t.term_b - lift(term_b_subset_enumeration(&q, &[0, 2]))?).abs());
        if t.chain_lhs > t.upper_bound() + 1e-10 {
            return Err(format!("KL {} above a-b+c = {}", t.chain_lhs, t.upper_bound()));
        }
    }
    ensure(worst_chain < 1e-10 && worst_b < 1e-10, format!("chain gap {worst_chain:.1e}, term-b gap {worst_b:.1e}"))
}

// --- nanoformer ---

fn nano_model(layers: usize, rng: &mut ChaCha8Rng) -> std::result::Result<Nanoformer<f64>, String> {
    let cfg = NanoConfig { layers, d_model: 16, d_k: 8, d_ff: 32, alphabet: 6, seq_len: 12, ..NanoConfig::default() };
    Ok(Nanoformer::new(lift(TransformerParams::init(rng.random(), cfg))?))
}

fn refresh_gap(model: &Nanoformer<f64>, a_size: usize, rng: &mut ChaCha8Rng) -> std::result::Result<f64, String> {
    let state = MaskState::new(12);
    let set: Vec<usize> = sample(rng, 12, 6).into_vec();
    let committed: Vec<(usize, usize)> = set[..a_size].iter().map(|&i| (i, rng.random_range(0..6))).collect();
    let (_, cache) = model.full_forward(&state);
    let part = lift(model.partial_forward(&cache, &state, &set, &committed))?;
    let (fresh, _) = model.full_forward(&lift(state.with(&committed))?);
    let rows: Vec<Vec<f64>> = part.positions.iter().map(|&i| fresh.logits.row(i).to_vec()).collect();
    Ok(max_abs_logit_gap(&part.logits, &rows))
}

fn nano_single_layer_exact(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let model = nano_model(1, rng)?;
        worst = worst.max(refresh_gap(&model, 3, rng)?);
    }
    ensure(worst <= 1e-12, format!("max logit gap {worst:.2e}"))
}

fn nano_empty_commit_exact(rng: &mut ChaCha8Rng) -> CheckResult {
    let mut worst: f64 = 0.0;
    for layers in 1..=3 {
        let model = nano_model(layers, rng)?;
        worst = worst.max(refresh_gap(&model, 0, rng)?);
    }
    ensure(worst <= 1e-12, format!("max logit gap {worst:.2e}"))
}

fn nano_stale_cache_rejected(rng: &mut ChaCha8Rng) -> CheckResult {
    let model = nano_model(2, rng)?;
    let s = MaskState::new(12);
    let (_, cache) = model.full_forward(&s);
    let moved = lift(s.with(&[(0, 1)]))?;
    match model.partial_forward(&cache, &moved, &[1, 2], &[]) {
        Err(Error::CacheInvalid(_)) => Ok("cache-invalid raised".into()),
        other => Err(format!("expected cache-invalid, got {other:?}")),
    }
}

fn nano_valid_conditionals(rng: &mut ChaCha8Rng) -> CheckResult {
    let model = nano_model(2, rng)?;
    let conds = lift(model.masked_conditionals(&MaskState::new(12)))?;
    let worst = conds.iter().map(|(_, c)| (c.probs().iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    ensure(worst < 1e-12, format!("max mass error {worst:.2e}"))
}

// --- policies ---

fn policies_merge_example(_: &mut ChaCha8Rng) -> CheckResult {
    let i = UnmaskOrder(vec![1, 2, 5, 4, 0, 3]);
    let j = UnmaskOrder(vec![3, 2, 0, 4, 5, 1]);
    let merged = lift(merge_orderings(&i, &j, 4, 2))?;
    ensure(merged.0 == vec![1, 2, 3, 0, 4, 5], format!("merged {:?}", merged.0))
}

fn policies_halton_bit_reversal(_: &mut ChaCha8Rng) -> CheckResult {
    let d = 16;
    let order = lift(order_halton_1d(d, &(0..d).collect::<Vec<_>>()))?;
    let expected: Vec<usize> = (0..d).map(|t: usize| t.reverse_bits() >> (usize::BITS - 4)).collect();
    ensure(order.0 == expected, format!("order {:?}", order.0))
}

fn policies_halton_permutations(rng: &mut ChaCha8Rng) -> CheckResult {
    for _ in 0..50 {
        let d = rng.random_range(1..40);
        let masked: Vec<usize> = (0..d).filter(|_| rng.random::<f64>() < 0.6).collect();
        if masked.is_empty() {
            continue;
        }
        let mut o = lift(order_halton_1d(d, &masked))?.0;
        o.sort_unstable();
        if o != masked {
            return Err(format!("1D order is not a permutation for D = {d}"));
        }
    }
    let mut o = lift(order_halton_2d(4, 6, 24, &(0..24).collect::<Vec<_>>()))?.0;
    o.sort_unstable();
    ensure(o == (0..24).collect::<Vec<_>>(), "2D order covers the grid".into())
}

// --- schedules ---

fn schedules_endpoints(_: &mut ChaCha8Rng) -> CheckResult {
    for kind in [ScheduleKind::Cosine, ScheduleKind::Uniform] {
        for d in [1, 5, 64, 256] {
            for steps in [1, 2, d / 2, d] {
                if steps == 0 || steps > d {
                    continue;
                }
                let s = lift(unmask_counts(kind, d, steps))?;
                let halves = s.half_step_counts();
                let ok = s.cumulative[0] == 0
                    && s.cumulative[steps] == d
                    && s.cumulative.windows(2).all(|w| w[0] <= w[1])
                    && (1..=steps).all(|n| s.cumulative[n - 1] <= halves[n - 1] && halves[n - 1] <= s.cumulative[n]);
                if !ok {
                    return Err(format!("{kind} D = {d} N = {steps}: {:?}", s.cumulative));
                }
            }
        }
    }
    Ok("monotone with fixed endpoints".into())
}

fn schedules_temperature(_: &mut ChaCha8Rng) -> CheckResult {
    let ok = gumbel_temp(6.0, 4, 8) == 3.0 && gumbel_temp(6.0, 8, 8) == 0.0 && gumbel_temp(f64::INFINITY, 8, 8) == 0.0;
    ensure(ok, "alpha (1 - n/N) with zero final temperature".into())
}

// --- metrics ---

fn metrics_tv_properties(rng: &mut ChaCha8Rng) -> CheckResult {
    for _ in 0..200 {
        let mk = |rng: &mut ChaCha8Rng| -> Pmf<usize> { Categorical::random(5, rng).probs().iter().copied().enumerate().collect() };
        let (p, q, r) = (mk(rng), mk(rng), mk(rng));
        let (pq, qr, pr) = (tv_exact(&p, &q), tv_exact(&q, &r), tv_exact(&p, &r));
        if !(0.0..=1.0).contains(&pq) || (pq - tv_exact(&q, &p)).abs() > 1e-15 || pr > pq + qr + 1e-15 {
            return Err("TV is not a bounded symmetric metric".into());
        }
    }
    Ok("bounded, symmetric, triangle inequality".into())
}

fn metrics_entropy_examples(_: &mut ChaCha8Rng) -> CheckResult {
    let a = sequence_entropy(&[3, 3, 3, 3]);
    let b = sequence_entropy(&[0, 1, 2, 3]);
    ensure(a == 0.0 && (b - 4f64.ln()).abs() < 1e-15, format!("H(constant) = {a}, H(distinct) = {b}"))
}

fn checks(suite: &str) -> Vec<(&'static str, CheckFn)> {
    match suite {
        "gumbel" => vec![
            ("prefix-pmf-normalizes", gumbel_normalization),
            ("monte-carlo-prefix-law", gumbel_monte_carlo),
            ("shift-invariance", gumbel_shift_invariance),
        ],
        "rounds" => vec![
            ("exact-pmfs-normalize", rounds_exact_normalize),
            ("moment-monte-carlo", rounds_moment_monte_carlo),
            ("unbiased-token-marginals", rounds_unbiased_marginals),
            ("full-selection-product-law", rounds_full_selection_product),
            ("tv-decreases-within-bound", rounds_tv_trend),
        ],
        "oracle" => vec![
            ("one-by-one-cts-unbiased", oracle_cts_unbiased),
            ("tempering-biases", oracle_tempering_biases),
            ("kl-ledger", oracle_kl_ledger),
        ],
        "nanoformer" => vec![
            ("single-layer-refresh-exact", nano_single_layer_exact),
            ("empty-commit-refresh-exact", nano_empty_commit_exact),
            ("stale-cache-rejected", nano_stale_cache_rejected),
            ("conditionals-normalize", nano_valid_conditionals),
        ],
        "policies" => vec![
            ("hybrid-merge-example", policies_merge_example),
            ("halton-bit-reversal", policies_halton_bit_reversal),
            ("halton-permutations", policies_halton_permutations),
        ],
        "schedules" => vec![("endpoints-and-half-steps", schedules_endpoints), ("temperature", schedules_temperature)],
        "metrics" => vec![("tv-metric", metrics_tv_properties), ("sequence-entropy", metrics_entropy_examples)],
        _ => Vec::new(),
    }
}

/// Runs the selected suites (all when `suites` is empty).
pub fn run_suites(seed: u64, suites: &[String]) -> Result<Vec<CheckReport>> {
    let selected: Vec<&'static str> = if suites.is_empty() {
        SUITES.to_vec()
    } else {
        suites
            .iter()
            .map(|s| {
                SUITES.iter().copied().find(|k| k == s).ok_or_else(|| {
                    Error::Argument(format!("unknown suite '{s}'; expected one of {}", SUITES.join(", ")))
                })
            })
            .collect::<Result<_>>()?
    };
    let mut reports = Vec::new();
    for suite in selected {
        for (name, check) in checks(suite) {
            let mut rng = stream_rng(seed, &format!("verify/{suite}/{name}"), 0);
            let start = Instant::now();
            let outcome = check(&mut rng);
            let seconds = start.elapsed().as_secs_f64();
            let (passed, detail) = match outcome {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            reports.push(CheckReport { suite, check: name, passed, detail, seconds });
        }
    }
    Ok(reports)
}

pub fn format_table(reports: &[CheckReport]) -> String {
    let mut out = format!("{:<11} {:<30} {:<6} {}\n", "suite", "check", "result", "detail");
    for r in reports {
        out.push_str(&format!(
            "{:<11} {:<30} {:<6} {} ({:.2}s)\n",
            r.suite,
            r.check,
            if r.passed { "PASS" } else { "FAIL" },
            r.detail,
            r.seconds
        ));
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    out.push_str(&format!("{} checks, {} failed\n", reports.len(), failed));
    out
}

pub fn run(common: &CommonArgs, args: &VerifyArgs) -> Result<i32> {
    let seed = common.seed.unwrap_or(0);
    let reports = run_suites(seed, &args.suite)?;
    print!("{}", format_table(&reports));
    if let Some(path) = &common.out {
        let json = serde_json::json!({ "seed": seed, "suites": args.suite, "checks": reports });
        write_output(Some(path), &(serde_json::to_string_pretty(&json)? + "\n"))?;
    }
    Ok(if reports.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_FAILURE })
}
