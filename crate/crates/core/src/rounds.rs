//! One unmasking round of the MaskGIT and moment samplers, their exact
//! output laws for small instances, and the TV bound between them.
//!
//! Both rounds take the per-position conditionals `p_1..p_N` of the masked
//! positions (indexed `0..N` here) and return `k` distinct indices with their
//! tokens. The Gumbel temperature `α` enters MaskGIT as the noise scale and
//! the moment sampler only through `β = 1 + 1/α`. `α = f64::INFINITY` is
//! accepted and means ranking by noise alone (β = 1).

use std::collections::BTreeMap;

use rand::Rng;

use crate::dist::Categorical;
use crate::error::{Error, Result};
use crate::gumbel::{gumbel_top_k, ordered_prefixes, top_k_prefix_log_pmf};
use crate::metrics::Pmf;

/// Upper limit on the number of entries any exact enumeration may visit.
pub const ENUMERATION_LIMIT: f64 = 1e6;

/// `k` distinct indices in selection order and their tokens.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RoundOutcome {
    pub indices: Vec<usize>,
    pub tokens: Vec<usize>,
}

/// Exact law of a round over ordered (indices, tokens) outcomes.
pub type RoundPmf = Pmf<RoundOutcome>;

/// `β = 1 + 1/α`; equals 1 for `α = ∞`.
pub fn beta_from_alpha(alpha: f64) -> f64 {
    1.0 + 1.0 / alpha
}

fn check_round(ps: &[Categorical], k: usize) -> Result<()> {
    if k == 0 || k > ps.len() {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={}", ps.len())));
    }
    let s = ps[0].len();
    if ps.iter().any(|p| p.len() != s) {
        return Err(Error::Argument("conditionals use different alphabets".into()));
    }
    Ok(())
}

fn check_alpha(alpha: f64, allow_zero: bool) -> Result<()> {
    let ok = if allow_zero { alpha >= 0.0 } else { alpha > 0.0 };
    if ok {
        Ok(())
    } else {
        Err(Error::Argument(format!("Gumbel temperature must be positive, got {alpha}")))
    }
}

/// Sample-then-choose: draw `x_i ~ p_i` everywhere, then keep the top `k` of
/// `log p_i(x_i) + α ξ_i`. `α = 0` gives deterministic ranking by the
/// sampled log-probabilities.
pub fn maskgit_round<R: Rng + ?Sized>(
    ps: &[Categorical],
    k: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<RoundOutcome> {
    check_round(ps, k)?;
    check_alpha(alpha, true)?;
    let drawn: Vec<usize> = ps.iter().map(|p| p.sample(rng)).collect();
    let scores: Vec<f64> = ps.iter().zip(&drawn).map(|(p, &x)| p.prob(x).ln()).collect();
    let indices = gumbel_top_k(&scores, k, alpha, rng)?.indices;
    let tokens = indices.iter().map(|&i| drawn[i]).collect();
    Ok(RoundOutcome { indices, tokens })
}

/// Choose-then-sample with moment scores: select by Gumbel-top-k on
/// `log ‖p_i‖_β^β` at noise scale `selection_tau`, then draw each chosen
/// token from `p_i^γ / ‖p_i‖_γ^γ`.
pub fn moment_round_with<R: Rng + ?Sized>(
    ps: &[Categorical],
    k: usize,
    beta: f64,
    selection_tau: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<RoundOutcome> {
    check_round(ps, k)?;
    let scores: Vec<f64> = ps.iter().map(|p| p.log_power_sum(beta)).collect();
    let indices = gumbel_top_k(&scores, k, selection_tau, rng)?.indices;
    let tokens = indices
        .iter()
        .map(|&i| ps[i].temper(gamma).map(|t| t.sample(rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RoundOutcome { indices, tokens })
}

/// One moment-sampler round: unit-temperature selection on `β = 1 + 1/α`.
/// `γ = β` approximates MaskGIT, `γ = 1` keeps token marginals unbiased.
pub fn moment_round<R: Rng + ?Sized>(
    ps: &[Categorical],
    k: usize,
    alpha: f64,
    gamma: f64,
    rng: &mut R,
) -> Result<RoundOutcome> {
    check_alpha(alpha, false)?;
    moment_round_with(ps, k, beta_from_alpha(alpha), 1.0, gamma, rng)
}

fn guard(what: &'static str, needed: f64) -> Result<()> {
    if needed > ENUMERATION_LIMIT {
        Err(Error::Capacity { what, needed, limit: ENUMERATION_LIMIT })
    } else {
        Ok(())
    }
}

/// Mixed-radix counter over `S^len`, lowest position fastest.
fn token_tuples(s: usize, len: usize) -> impl Iterator<Item = Vec<usize>> {
    let total = s.pow(len as u32);
    (0..total).map(move |mut code| {
        let mut z = vec![0; len];
        for slot in z.iter_mut() {
            *slot = code % s;
            code /= s;
        }
        z
    })
}

/// Exact law of [`moment_round`]: product over the selection of
/// `‖p_i‖_β^β / Σ_{rest} ‖p_j‖_β^β` times the tempered token probabilities.
pub fn moment_round_exact_pmf(ps: &[Categorical], k: usize, alpha: f64, gamma: f64) -> Result<RoundPmf> {
    check_round(ps, k)?;
    check_alpha(alpha, false)?;
    let n = ps.len();
    let s = ps[0].len();
    guard("moment round pmf", (n as f64).powi(k as i32) * (s as f64).powi(k as i32))?;

    let beta = beta_from_alpha(alpha);
    let scores: Vec<f64> = ps.iter().map(|p| p.log_power_sum(beta)).collect();
    let tempered = ps.iter().map(|p| p.temper(gamma)).collect::<Result<Vec<_>>>()?;

    let mut pmf = RoundPmf::new();
    for indices in ordered_prefixes(n, k) {
        let select = top_k_prefix_log_pmf(&scores, &indices)?.exp();
        for tokens in token_tuples(s, k) {
            let tok: f64 = indices.iter().zip(&tokens).map(|(&i, &z)| tempered[i].prob(z)).product();
            let p = select * tok;
            if p > 0.0 {
                pmf.insert(RoundOutcome { indices: indices.clone(), tokens }, p);
            }
        }
    }
    Ok(pmf)
}

/// Exact law of [`maskgit_round`], marginalizing over every full token
/// assignment `z ∈ S^N`: given `z`, the selection is Gumbel-top-k on
/// `log p_i(z_i) / α`.
pub fn maskgit_round_exact_pmf(ps: &[Categorical], k: usize, alpha: f64) -> Result<RoundPmf> {
    check_round(ps, k)?;
    check_alpha(alpha, false)?;
    let n = ps.len();
    let s = ps[0].len();
    guard("maskgit round pmf", (s as f64).powi(n as i32))?;

    let prefixes = ordered_prefixes(n, k);
    let tuples = s.pow(k as u32);
    let mut dense = vec![0.0f64; prefixes.len() * tuples];
    let inv_alpha = 1.0 / alpha;

    for z in token_tuples(s, n) {
        let weight: f64 = ps.iter().zip(&z).map(|(p, &x)| p.prob(x)).product();
        if weight == 0.0 {
            continue;
        }
        let mu: Vec<f64> = ps.iter().zip(&z).map(|(p, &x)| inv_alpha * p.prob(x).ln()).collect();
        for (pi, prefix) in prefixes.iter().enumerate() {
            let select = top_k_prefix_log_pmf(&mu, prefix)?.exp();
            let code = prefix.iter().rev().fold(0, |acc, &i| acc * s + z[i]);
            dense[pi * tuples + code] += weight * select;
        }
    }

    let mut pmf = RoundPmf::new();
    for (pi, prefix) in prefixes.iter().enumerate() {
        for (code, tokens) in token_tuples(s, k).enumerate() {
            let p = dense[pi * tuples + code];
            if p > 0.0 {
                pmf.insert(RoundOutcome { indices: prefix.clone(), tokens }, p);
            }
        }
    }
    Ok(pmf)
}

/// Upper bound on `d_TV(p_moment, p_MaskGIT)` for one round:
/// `5 sqrt(r) (1 + sqrt(log⁺(1/r)))` with `r = k² |S|^{1/α} / N`.
pub fn tv_theorem_bound(n: usize, k: usize, alphabet: usize, alpha: f64) -> f64 {
    let r = (k * k) as f64 * (alphabet as f64).powf(1.0 / alpha) / n as f64;
    let log_plus = (1.0 / r).max(1.0).ln();
    5.0 * r.sqrt() * (1.0 + log_plus.sqrt())
}

/// Unordered view of a round law: outcomes become sorted `(index, token)`
/// sets. No bound is claimed for TV over this view.
pub fn unordered_pmf(pmf: &RoundPmf) -> Pmf<Vec<(usize, usize)>> {
    let mut out: Pmf<Vec<(usize, usize)>> = BTreeMap::new();
    for (o, &p) in pmf {
        let mut pairs: Vec<(usize, usize)> = o.indices.iter().copied().zip(o.tokens.iter().copied()).collect();
        pairs.sort_unstable();
        *out.entry(pairs).or_insert(0.0) += p;
    }
    out
}

/// Law of the chosen index sequence alone.
pub fn index_pmf(pmf: &RoundPmf) -> Pmf<Vec<usize>> {
    let mut out: Pmf<Vec<usize>> = BTreeMap::new();
    for (o, &p) in pmf {
        *out.entry(o.indices.clone()).or_insert(0.0) += p;
    }
    out
}

/// Token law at `position` conditional on it being selected, or `None` if
/// it is never selected.
pub fn token_law_given_selected(pmf: &RoundPmf, position: usize, alphabet: usize) -> Option<Vec<f64>> {
    let mut mass = vec![0.0; alphabet];
    for (o, &p) in pmf {
        if let Some(slot) = o.indices.iter().position(|&i| i == position) {
            mass[o.tokens[slot]] += p;
        }
    }
    let total: f64 = mass.iter().sum();
    (total > 0.0).then(|| mass.into_iter().map(|m| m / total).collect())
}
