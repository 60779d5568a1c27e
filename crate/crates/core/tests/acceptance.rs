//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the lines are always printed; exits non-zero if any fails.

use std::time::Instant;

use mdsampler::cli::experiment::{execute, ExperimentConfig, ModelKind, PolicyName};
use mdsampler::cli::{self, csv_body};
use mdsampler::gumbel::{gumbel_top_k, ordered_prefixes, top_k_prefix_pmf};
use mdsampler::metrics::{tv_empirical, tv_exact, EmpiricalPmf, Pmf};
use mdsampler::nanoformer::max_abs_logit_gap;
use mdsampler::oracle::{
    exact_cts_distribution, kl_decomposition_terms, term_b_subset_enumeration, ConfidenceKernel, UniformKernel,
};
use mdsampler::policies::{merge_orderings, UnmaskOrder};
use mdsampler::rounds::{maskgit_round_exact_pmf, moment_round, moment_round_exact_pmf, tv_theorem_bound};
use mdsampler::{Categorical, JointTable, MaskState, NanoConfig, Nanoformer, ScheduleKind, TransformerParams};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gumbel_top_k_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mu: Vec<f64> = (0..5).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
    let exact: Pmf<Vec<usize>> =
        ordered_prefixes(5, 3).into_iter().map(|p| (p.clone(), top_k_prefix_pmf(&mu, &p).unwrap())).collect();
    let emp: EmpiricalPmf<Vec<usize>> =
        (0..1_000_000).map(|_| gumbel_top_k(&mu, 3, 1.0, &mut rng).unwrap().indices).collect();
    let tv = tv_empirical(&emp, &exact);
    check(tv < 0.01, format!("TV = {tv:.5} (< 0.01) over {} prefixes", exact.len()))
}

fn moment_exact_pmf() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let ps: Vec<Categorical> = (0..6).map(|_| Categorical::random(3, &mut rng)).collect();
    let (alpha, beta) = (1.0, 2.0);
    let exact = moment_round_exact_pmf(&ps, 2, alpha, beta).unwrap();
    let emp: EmpiricalPmf<_> = (0..1_000_000).map(|_| moment_round(&ps, 2, alpha, beta, &mut rng).unwrap()).collect();
    let tv = tv_empirical(&emp, &exact);
    check(tv < 0.01, format!("TV = {tv:.5} (< 0.01) over {} outcomes", exact.len()))
}

fn tv_trend() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let base: Vec<Categorical> = (0..4).map(|_| Categorical::random(2, &mut rng)).collect();
    let mut tvs = Vec::new();
    for n in [4, 8, 12, 16] {
        let ps: Vec<Categorical> = (0..n).map(|i| base[i % 4].clone()).collect();
        let tv = tv_exact(&maskgit_round_exact_pmf(&ps, 1, 1.0).unwrap(), &moment_round_exact_pmf(&ps, 1, 1.0, 2.0).unwrap());
        let bound = tv_theorem_bound(n, 1, 2, 1.0).min(1.0);
        if tv > bound {
            return Err(format!("N = {n}: TV {tv} above min(1, bound) = {bound}"));
        }
        tvs.push(tv);
    }
    let text: Vec<String> = tvs.iter().map(|t| format!("{t:.3e}")).collect();
    check(tvs.windows(2).all(|w| w[1] < w[0]), format!("TV at N = 4, 8, 12, 16: {}", text.join(", ")))
}

fn cts_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    // Prefers higher positions once a token 1 has been revealed.
    let token_kernel = |state: &MaskState, conds: &[(usize, Categorical)]| {
        let ones = state.tokens().iter().filter(|t| **t == Some(1)).count();
        let w: Vec<f64> = conds.iter().map(|(i, _)| 1.0 + (ones * (i + 1)) as f64).collect();
        let total: f64 = w.iter().sum();
        conds.iter().zip(w).map(|((i, _), w)| (*i, w / total)).collect::<Vec<_>>()
    };
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let q = JointTable::random(3, 2, &mut rng).unwrap();
        worst = worst.max(tv_exact(&exact_cts_distribution(&q, &UniformKernel, 1.0).unwrap(), &q.to_pmf()));
        worst = worst.max(tv_exact(&exact_cts_distribution(&q, &token_kernel, 1.0).unwrap(), &q.to_pmf()));
        worst = worst.max(tv_exact(&exact_cts_distribution(&q, &ConfidenceKernel { sharpness: 3.0 }, 1.0).unwrap(), &q.to_pmf()));
    }
    let q = JointTable::random(3, 2, &mut rng).unwrap();
    let biased = tv_exact(&exact_cts_distribution(&q, &UniformKernel, 2.0).unwrap(), &q.to_pmf());
    check(worst < 1e-10 && biased > 0.01, format!("max TV at gamma 1 = {worst:.2e} (< 1e-10); TV at gamma 2 = {biased:.4} (> 0.01)"))
}

fn kl_ledger() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut chain, mut b_gap, mut slack) = (0.0f64, 0.0f64, f64::INFINITY);
    for _ in 0..100 {
        let q = JointTable::random(4, 2, &mut rng).unwrap();
        let set = sample(&mut rng, 4, 2).into_vec();
        let t = kl_decomposition_terms(&q, &set).unwrap();
        chain = chain.max((t.chain_lhs - (t.chain_rhs1 + t.chain_rhs2)).abs());
        b_gap = b_gap.max((t.term_b - term_b_subset_enumeration(&q, &set).unwrap()).abs());
        slack = slack.min(t.upper_bound() - t.chain_lhs);
    }
    check(
        chain < 1e-10 && b_gap < 1e-10 && slack >= 0.0,
        format!("chain-rule gap {chain:.1e}; term (b) gap {b_gap:.1e}; min (a-b+c) - KL = {slack:.3e}"),
    )
}

fn random_state(d: usize, s: usize, min_masked: usize, rng: &mut ChaCha8Rng) -> MaskState {
    let unmasked = rng.random_range(0..=d - min_masked);
    let mut tokens = vec![None; d];
    for i in sample(rng, d, unmasked) {
        tokens[i] = Some(rng.random_range(0..s));
    }
    MaskState::from_tokens(tokens)
}

/// (refreshed gap, stale gap, FLOP ratio, |I| / D) for one random instance.
fn cache_instance(layers: usize, a_size: usize, rng: &mut ChaCha8Rng) -> (f64, f64, f64, f64) {
    let cfg = NanoConfig { layers, d_model: 32, d_k: 16, d_ff: 64, alphabet: 8, seq_len: 16, ..NanoConfig::default() };
    let model: Nanoformer<f64> = Nanoformer::new(TransformerParams::init(rng.random(), cfg).unwrap());
    let state = random_state(16, 8, 8, rng);
    let masked = state.masked();
    let set_size = rng.random_range(a_size.max(1) + 1..=masked.len());
    let set: Vec<usize> = sample(rng, masked.len(), set_size).into_iter().map(|j| masked[j]).collect();
    let committed: Vec<(usize, usize)> = set[..a_size].iter().map(|&i| (i, rng.random_range(0..8))).collect();

    let (full, cache) = model.full_forward(&state);
    let part = model.partial_forward(&cache, &state, &set, &committed).unwrap();
    let (fresh, _) = model.full_forward(&state.with(&committed).unwrap());
    let fresh_rows: Vec<Vec<f64>> = part.positions.iter().map(|&i| fresh.logits.row(i).to_vec()).collect();
    let stale_gap = part
        .positions
        .iter()
        .zip(&fresh_rows)
        .flat_map(|(&i, row)| full.logits.row(i).iter().zip(row).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    let ratio = (full.attention_flops + part.attention_flops) as f64 / full.attention_flops as f64;
    (max_abs_logit_gap(&part.logits, &fresh_rows), stale_gap, ratio, set_size as f64 / 16.0)
}

fn caching() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut single_layer: f64 = 0.0;
    let mut flop_gap: f64 = 0.0;
    for _ in 0..50 {
        let a_size = rng.random_range(1..4);
        let (gap, _, ratio, frac) = cache_instance(1, a_size, &mut rng);
        single_layer = single_layer.max(gap);
        flop_gap = flop_gap.max((ratio - (1.0 + frac)).abs());
    }
    let mut empty: f64 = 0.0;
    for layers in 1..=3 {
        for _ in 0..50 {
            let (gap, _, ratio, frac) = cache_instance(layers, 0, &mut rng);
            empty = empty.max(gap);
            flop_gap = flop_gap.max((ratio - (1.0 + frac)).abs());
        }
    }
    let mut wins = 0;
    for _ in 0..100 {
        let a_size = rng.random_range(1..4);
        let (gap, stale, ratio, frac) = cache_instance(3, a_size, &mut rng);
        wins += usize::from(gap < stale);
        flop_gap = flop_gap.max((ratio - (1.0 + frac)).abs());
    }
    check(
        single_layer <= 1e-12 && empty <= 1e-12 && wins >= 90 && flop_gap < 1e-12,
        format!(
            "L=1 max gap {single_layer:.1e}; empty-A max gap {empty:.1e}; L=3 refresh wins {wins}/100; FLOP ratio off by {flop_gap:.1e}"
        ),
    )
}

fn temperature_diversity() -> Outcome {
    let config = ExperimentConfig {
        policies: vec![PolicyName::Random],
        gammas: vec![1.0, 2.0, 4.0],
        generations: 1024,
        seed: 107,
        ..ExperimentConfig::default()
    };
    let out = execute(&config).map_err(|e| e.to_string())?;
    let means: Vec<f64> = out.rows.iter().map(|r| r.entropy_mean).collect();
    check(
        means.len() == 3 && means.windows(2).all(|w| w[1] <= w[0]) && means[2] < means[0],
        format!("mean sequence entropy at gamma 1, 2, 4: {means:.4?}"),
    )
}

fn hybrid_merge() -> Outcome {
    // The worked example, shifted to 0-based positions.
    let i = UnmaskOrder(vec![2, 3, 6, 5, 1, 4].into_iter().map(|p| p - 1).collect());
    let j = UnmaskOrder(vec![4, 3, 1, 5, 6, 2].into_iter().map(|p| p - 1).collect());
    let merged: Vec<usize> = merge_orderings(&i, &j, 4, 2).map_err(|e| e.to_string())?.0.iter().map(|p| p + 1).collect();
    check(merged == vec![2, 3, 4, 1, 5, 6], format!("merged {merged:?}"))
}

fn holder_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut min_margin = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..1000 {
        let s = rng.random_range(2..=64);
        let p = Categorical::random(s, &mut rng);
        for alpha in [1.0, 3.0, 12.0] {
            let beta = 1.0 + 1.0 / alpha;
            let lower = (s as f64).powf(-1.0 / alpha);
            let value = p.power_sum(beta);
            violations += usize::from(value < lower);
            min_margin = min_margin.min(value / lower - 1.0);
        }
    }
    check(violations == 0, format!("{violations} violations in 3000; min relative margin {min_margin:.3e}"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ExperimentConfig {
        transformer: NanoConfig { seq_len: 16, alphabet: 8, ..NanoConfig::default() },
        policies: vec![PolicyName::Random, PolicyName::Confidence, PolicyName::Moment, PolicyName::Hybrid],
        drivers: vec![
            mdsampler::cli::experiment::Driver::Cts,
            mdsampler::cli::experiment::Driver::CtsCached,
            mdsampler::cli::experiment::Driver::MaskgitChain,
        ],
        gammas: vec![1.0, 2.0],
        steps: vec![4, 8],
        schedule: ScheduleKind::Cosine,
        generations: 64,
        model: ModelKind::Transformer,
        ..ExperimentConfig::default()
    };
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).map_err(|e| e.to_string())?;
    let mut bodies = Vec::new();
    for threads in ["1", "8"] {
        let out = dir.path().join(format!("run-{threads}.csv"));
        let code = cli::run([
            "mdsampler",
            "cts-experiment",
            "--config",
            config_path.to_str().unwrap(),
            "--seed",
            "110",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        if code != 0 {
            return Err(format!("cts-experiment exited with {code}"));
        }
        bodies.push(csv_body(&std::fs::read_to_string(&out).map_err(|e| e.to_string())?));
    }
    let rows = bodies[0].lines().count().saturating_sub(1);
    check(bodies[0] == bodies[1] && rows > 0, format!("{rows} data rows identical under 1 and 8 threads"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("Gumbel-top-k prefix law", gumbel_top_k_law),
        ("moment round exact pmf", moment_exact_pmf),
        ("MaskGIT vs moment TV trend and bound", tv_trend),
        ("one-by-one choose-then-sample exactness", cts_exactness),
        ("KL decomposition ledger", kl_ledger),
        ("partial caching exactness and cost", caching),
        ("temperature-diversity direction", temperature_diversity),
        ("hybrid merge worked example", hybrid_merge),
        ("Holder lower bound on power sums", holder_bound),
        ("experiment determinism across thread counts", determinism),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag} {name}: {detail} [{secs:.1}s]", n + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
