//! Gumbel noise and Gumbel-top-k selection.
//!
//! Perturbing scores `μ_i` with i.i.d. standard Gumbel noise and taking the
//! top k is size-k sampling without replacement with logits `μ_i`:
//!
//! ```text
//! P(i*_l = i_l | i*_1 = i_1, ..., i*_{l-1} = i_{l-1}) = exp(μ_{i_l}) / Σ_{i ∉ I_{l-1}} exp(μ_i)
//! ```
//!
//! [`top_k_prefix_pmf`] evaluates the product of these conditionals exactly and
//! serves as the oracle for the sampling routines.

use rand::Rng;

use crate::dist::log_sum_exp;
use crate::error::{Error, Result};

/// Smallest admissible uniform draw; keeps the transform finite.
pub const UNIFORM_MIN: f64 = f64::MIN_POSITIVE;

/// Largest admissible uniform draw: the last double below 1.
pub const UNIFORM_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Standard Gumbel quantile `-log(-log u)`, with `u` clamped to
/// `[UNIFORM_MIN, UNIFORM_MAX]`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_MIN, UNIFORM_MAX);
    -(-u.ln()).ln()
}

pub fn sample_gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    gumbel_from_uniform(rng.random::<f64>())
}

/// Indices chosen by Gumbel-top-k, in descending perturbed score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKSelection {
    pub indices: Vec<usize>,
}

/// Sorts indices by descending score; ties go to the lower index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Perturbed scores `μ_i + τ ξ_i`. One noise draw per entry, in index order,
/// whatever the temperature. `τ = ∞` ranks by noise alone.
pub fn perturbed_scores<R: Rng + ?Sized>(mu: &[f64], tau: f64, rng: &mut R) -> Vec<f64> {
    mu.iter()
        .map(|&m| {
            let xi = sample_gumbel(rng);
            if tau.is_infinite() {
                xi
            } else if tau == 0.0 {
                m
            } else {
                m + tau * xi
            }
        })
        .collect()
}

/// Full Gumbel ordering of all `mu.len()` indices at temperature `tau`.
pub fn gumbel_order<R: Rng + ?Sized>(mu: &[f64], tau: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(tau >= 0.0) {
        return Err(Error::Argument(format!("temperature must be non-negative, got {tau}")));
    }
    Ok(argsort_desc(&perturbed_scores(mu, tau, rng)))
}

/// argtop-k of `{μ_i + τ ξ_i}`.
pub fn gumbel_top_k<R: Rng + ?Sized>(
    mu: &[f64],
    k: usize,
    tau: f64,
    rng: &mut R,
) -> Result<TopKSelection> {
    if k == 0 || k > mu.len() {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={}", mu.len())));
    }
    let mut indices = gumbel_order(mu, tau, rng)?;
    indices.truncate(k);
    Ok(TopKSelection { indices })
}

/// Exact log-probability that unit-temperature Gumbel-top-k over `mu`
/// starts with `prefix`.
pub fn top_k_prefix_log_pmf(mu: &[f64], prefix: &[usize]) -> Result<f64> {
    let mut taken = vec![false; mu.len()];
    let mut log_p = 0.0;
    for &i in prefix {
        if i >= mu.len() {
            return Err(Error::Argument(format!("index {i} out of range 0..{}", mu.len())));
        }
        if taken[i] {
            return Err(Error::Argument(format!("duplicate index {i} in prefix")));
        }
        let log_norm = log_sum_exp(
            mu.iter().zip(&taken).filter(|(_, &t)| !t).map(|(&m, _)| m),
        );
        log_p += mu[i] - log_norm;
        taken[i] = true;
    }
    Ok(log_p)
}

pub fn top_k_prefix_pmf(mu: &[f64], prefix: &[usize]) -> Result<f64> {
    top_k_prefix_log_pmf(mu, prefix).map(f64::exp)
}

/// Every ordered selection of `k` distinct indices from `0..n`.
pub fn ordered_prefixes(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn extend(n: usize, k: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                extend(n, k, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    if k <= n {
        extend(n, k, &mut Vec::with_capacity(k), &mut vec![false; n], &mut out);
    }
    out
}
