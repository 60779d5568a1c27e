//! Exact ground truth for small instances: explicit joint tables, their
//! conditionals, the exact output law of one-by-one choose-then-sample, and
//! the KL decomposition of a two-round product sampler into entropy terms.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cts::MaskState;
use crate::dist::{Categorical, ProductModel};
use crate::error::{Error, Result};
use crate::gumbel::ordered_prefixes;
use crate::metrics::{compensated_sum, Pmf};

/// Largest table a [`JointTable`] may hold.
pub const TABLE_LIMIT: f64 = 1e6;
/// Largest number of (permutation, token path) pairs the CTS enumeration
/// may visit.
pub const PATH_LIMIT: f64 = 1e7;
/// Tolerance for a joint table's total mass.
pub const TABLE_SUM_TOLERANCE: f64 = 1e-12;

/// A dense joint distribution over `S^D`, row-major with position 0 slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointTable {
    pub seq_len: usize,
    pub alphabet_size: usize,
    pub probs: Vec<f64>,
}

fn table_size(seq_len: usize, alphabet: usize) -> Result<usize> {
    let needed = (alphabet as f64).powi(seq_len as i32);
    if needed > TABLE_LIMIT {
        return Err(Error::Capacity { what: "joint table", needed, limit: TABLE_LIMIT });
    }
    Ok(alphabet.pow(seq_len as u32))
}

impl JointTable {
    pub fn new(seq_len: usize, alphabet_size: usize, probs: Vec<f64>) -> Result<Self> {
        if seq_len == 0 || alphabet_size == 0 {
            return Err(Error::Argument("joint table needs D >= 1 and |S| >= 1".into()));
        }
        let size = table_size(seq_len, alphabet_size)?;
        if probs.len() != size {
            return Err(Error::InvalidDistribution(format!("expected {size} entries, got {}", probs.len())));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution("entries must be finite and non-negative".into()));
        }
        let total = compensated_sum(probs.iter().copied());
        if (total - 1.0).abs() > TABLE_SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { seq_len, alphabet_size, probs })
    }

    /// A draw from the flat Dirichlet over all `|S|^D` sequences.
    pub fn random<R: Rng + ?Sized>(seq_len: usize, alphabet_size: usize, rng: &mut R) -> Result<Self> {
        let size = table_size(seq_len, alphabet_size)?;
        let weights: Vec<f64> = (0..size).map(|_| -(1.0 - rng.random::<f64>()).ln() + 1e-300).collect();
        let total = compensated_sum(weights.iter().copied());
        Self::new(seq_len, alphabet_size, weights.into_iter().map(|w| w / total).collect())
    }

    /// Independent coordinates with the given marginals.
    pub fn product(marginals: &[Categorical]) -> Result<Self> {
        let s = marginals.first().map(Categorical::len).unwrap_or(0);
        if marginals.iter().any(|m| m.len() != s) {
            return Err(Error::Argument("marginals use different alphabets".into()));
        }
        let size = table_size(marginals.len(), s)?;
        let mut probs = Vec::with_capacity(size);
        let mut x = vec![0; marginals.len()];
        for idx in 0..size {
            decode_into(idx, s, &mut x);
            probs.push(marginals.iter().zip(&x).map(|(m, &t)| m.prob(t)).product());
        }
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        Self::new(marginals.len(), s, probs)
    }

    pub fn index_of(&self, x: &[usize]) -> usize {
        x.iter().fold(0, |acc, &t| acc * self.alphabet_size + t)
    }

    pub fn decode(&self, idx: usize) -> Vec<usize> {
        let mut x = vec![0; self.seq_len];
        decode_into(idx, self.alphabet_size, &mut x);
        x
    }

    pub fn prob(&self, x: &[usize]) -> f64 {
        self.probs[self.index_of(x)]
    }

    pub fn to_pmf(&self) -> Pmf<Vec<usize>> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (self.decode(i), p))
            .collect()
    }

    /// Dense marginal over `positions` (first listed slowest).
    pub fn marginal(&self, positions: &[usize]) -> Vec<f64> {
        let s = self.alphabet_size;
        let mut out = vec![0.0; s.pow(positions.len() as u32)];
        let mut x = vec![0; self.seq_len];
        for (idx, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            decode_into(idx, s, &mut x);
            let code = positions.iter().fold(0, |acc, &i| acc * s + x[i]);
            out[code] += p;
        }
        out
    }

    /// `E_{x_J ~ q_J} H(q_{i|J}(· | x_J))`.
    pub fn expected_conditional_entropy(&self, i: usize, given: &[usize]) -> f64 {
        let s = self.alphabet_size;
        let mut positions = given.to_vec();
        positions.push(i);
        let joint = self.marginal(&positions);
        compensated_sum(joint.chunks(s).map(|row| {
            let mass: f64 = row.iter().sum();
            if mass <= 0.0 {
                return 0.0;
            }
            -row.iter().filter(|&&v| v > 0.0).map(|&v| v * (v / mass).ln()).sum::<f64>()
        }))
    }

    /// Entropy of the marginal over `positions`.
    pub fn marginal_entropy(&self, positions: &[usize]) -> f64 {
        -compensated_sum(self.marginal(positions).into_iter().filter(|&v| v > 0.0).map(|v| v * v.ln()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: JointTable = serde_json::from_str(text)?;
        Self::new(raw.seq_len, raw.alphabet_size, raw.probs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn decode_into(mut idx: usize, s: usize, x: &mut [usize]) {
    for slot in x.iter_mut().rev() {
        *slot = idx % s;
        idx /= s;
    }
}

/// Exact conditional `q_{i|J}(· | x_J)` by summing out the free coordinates.
pub fn conditional(q: &JointTable, i: usize, state: &MaskState) -> Result<Categorical> {
    if i >= q.seq_len || state.seq_len() != q.seq_len {
        return Err(Error::Argument(format!("position {i} or state length does not match D = {}", q.seq_len)));
    }
    if !state.is_masked(i) {
        return Err(Error::Argument(format!("position {i} is already unmasked")));
    }
    let mut weights = vec![0.0; q.alphabet_size];
    let mut x = vec![0; q.seq_len];
    for (idx, &p) in q.probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        decode_into(idx, q.alphabet_size, &mut x);
        let consistent = state.tokens().iter().zip(&x).all(|(known, &t)| known.is_none_or(|k| k == t));
        if consistent {
            weights[x[i]] += p;
        }
    }
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::ZeroProbabilityCondition);
    }
    Categorical::from_weights(weights)
}

impl ProductModel for JointTable {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    fn conditional(&self, state: &MaskState, i: usize) -> Result<Categorical> {
        conditional(self, i, state)
    }
}

/// `φ(J | I') = (|I'| + 1)^{-1} / C(|I'|, |J|)`.
pub fn phi_weight(parent_size: usize, subset_size: usize) -> f64 {
    assert!(subset_size <= parent_size, "subset larger than parent");
    let mut binom = 1.0f64;
    for t in 0..subset_size {
        binom = binom * (parent_size - t) as f64 / (t + 1) as f64;
    }
    1.0 / ((parent_size + 1) as f64 * binom)
}

/// A KL value that records absolute-continuity violations instead of
/// failing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub value: f64,
    pub support_violation: bool,
}

/// `Σ q log(q/p)` in nats; `+∞` with the violation flag set when `q` puts
/// mass where `p` has none.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> Divergence {
    assert_eq!(q.len(), p.len(), "distributions over different spaces");
    let mut terms = Vec::with_capacity(q.len());
    for (&qx, &px) in q.iter().zip(p) {
        if qx == 0.0 {
            continue;
        }
        if px <= 0.0 {
            return Divergence { value: f64::INFINITY, support_violation: true };
        }
        terms.push(qx * (qx / px).ln());
    }
    Divergence { value: compensated_sum(terms), support_violation: false }
}

/// The exact quantities of the two-round KL ledger for first-round set `I`.
///
/// `p` is the two-round product sampler: `x_I ~ Π_{i∈I} q_i`, then
/// `x_{I^c} ~ Π_{j∉I} q_{j|I}(· | x_I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlTerms {
    /// `D_KL(q ‖ p)`.
    pub chain_lhs: f64,
    /// `D_KL(q_I ‖ Π_{i∈I} q_i)`.
    pub chain_rhs1: f64,
    /// `E_{x_I} D_KL(q_{I^c|I} ‖ Π_{j∉I} q_{j|I})`.
    pub chain_rhs2: f64,
    /// (a) `Σ_{i∈I} H(q_i)`.
    pub term_a: f64,
    /// (b) `Σ_{i∈I} E_{J ~ φ(·|I∖{i})} E_{x_J} H(q_{i|J})`, via the
    /// permutation average.
    pub term_b: f64,
    /// (c) `E_{x_I} Σ_{j∉I} H(q_{j|I})`.
    pub term_c: f64,
}

impl KlTerms {
    pub fn upper_bound(&self) -> f64 {
        self.term_a - self.term_b + self.term_c
    }
}

fn check_subset(q: &JointTable, set: &[usize]) -> Result<()> {
    let mut seen = vec![false; q.seq_len];
    for &i in set {
        if i >= q.seq_len || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Argument(format!("invalid first-round set {set:?}")));
        }
    }
    Ok(())
}

/// Term (b) as the average over all orderings `σ` of `I` of
/// `Σ_l E H(q_{σ_l | σ_1..σ_{l-1}})`.
pub fn term_b_permutation_average(q: &JointTable, set: &[usize]) -> Result<f64> {
    check_subset(q, set)?;
    let perms = ordered_prefixes(set.len(), set.len());
    let sums: Vec<f64> = perms
        .iter()
        .map(|perm| {
            let order: Vec<usize> = perm.iter().map(|&l| set[l]).collect();
            compensated_sum((0..order.len()).map(|l| q.expected_conditional_entropy(order[l], &order[..l])))
        })
        .collect();
    Ok(compensated_sum(sums) / perms.len() as f64)
}

/// Term (b) by literally weighting every subset `J ⊆ I∖{i}` with `φ`.
pub fn term_b_subset_enumeration(q: &JointTable, set: &[usize]) -> Result<f64> {
    check_subset(q, set)?;
    let mut terms = Vec::new();
    for (pos, &i) in set.iter().enumerate() {
        let rest: Vec<usize> = set.iter().enumerate().filter(|&(p, _)| p != pos).map(|(_, &j)| j).collect();
        for mask in 0u32..(1 << rest.len()) {
            let subset: Vec<usize> = (0..rest.len()).filter(|b| mask >> b & 1 == 1).map(|b| rest[b]).collect();
            let w = phi_weight(rest.len(), subset.len());
            terms.push(w * q.expected_conditional_entropy(i, &subset));
        }
    }
    Ok(compensated_sum(terms))
}

pub fn kl_decomposition_terms(q: &JointTable, set: &[usize]) -> Result<KlTerms> {
    check_subset(q, set)?;
    let s = q.alphabet_size;
    let rest: Vec<usize> = (0..q.seq_len).filter(|i| !set.contains(i)).collect();

    let singles: Vec<Vec<f64>> = set.iter().map(|&i| q.marginal(&[i])).collect();
    let q_set = q.marginal(set);
    // q_{I ∪ {j}} for each j outside I, with j fastest.
    let with_j: Vec<Vec<f64>> = rest
        .iter()
        .map(|&j| {
            let mut pos = set.to_vec();
            pos.push(j);
            q.marginal(&pos)
        })
        .collect();

    let mut lhs = Vec::new();
    let mut rhs2 = Vec::new();
    let mut x = vec![0; q.seq_len];
    for (idx, &qx) in q.probs.iter().enumerate() {
        if qx == 0.0 {
            continue;
        }
        decode_into(idx, s, &mut x);
        let code_set = set.iter().fold(0, |acc, &i| acc * s + x[i]);
        let first: f64 = set.iter().zip(&singles).map(|(&i, m)| m[x[i]]).product();
        let second: f64 = rest
            .iter()
            .zip(&with_j)
            .map(|(&j, m)| m[code_set * s + x[j]] / q_set[code_set])
            .product();
        lhs.push(qx * (qx / (first * second)).ln());
        rhs2.push(qx * (qx / q_set[code_set] / second).ln());
    }

    let marg_product: Vec<f64> = (0..q_set.len())
        .map(|code| {
            let mut c = code;
            let mut prod = 1.0;
            for m in singles.iter().rev() {
                prod *= m[c % s];
                c /= s;
            }
            prod
        })
        .collect();

    Ok(KlTerms {
        chain_lhs: compensated_sum(lhs),
        chain_rhs1: kl_divergence(&q_set, &marg_product).value,
        chain_rhs2: compensated_sum(rhs2),
        term_a: compensated_sum(set.iter().map(|&i| q.expected_conditional_entropy(i, &[]))),
        term_b: term_b_permutation_average(q, set)?,
        term_c: compensated_sum(rest.iter().map(|&j| q.expected_conditional_entropy(j, set))),
    })
}

/// A singleton position-selection kernel `π(j | I, x_I)` with explicit
/// probabilities.
pub trait SelectionKernel {
    /// Probabilities over the masked positions of `state`. `conditionals`
    /// holds the model's conditionals at those positions.
    fn probabilities(&self, state: &MaskState, conditionals: &[(usize, Categorical)]) -> Vec<(usize, f64)>;
}

impl<F> SelectionKernel for F
where
    F: Fn(&MaskState, &[(usize, Categorical)]) -> Vec<(usize, f64)>,
{
    fn probabilities(&self, state: &MaskState, conditionals: &[(usize, Categorical)]) -> Vec<(usize, f64)> {
        self(state, conditionals)
    }
}

/// Uniform over the masked positions.
pub struct UniformKernel;

impl SelectionKernel for UniformKernel {
    fn probabilities(&self, state: &MaskState, _conditionals: &[(usize, Categorical)]) -> Vec<(usize, f64)> {
        let masked = state.masked();
        let w = 1.0 / masked.len() as f64;
        masked.into_iter().map(|i| (i, w)).collect()
    }
}

/// `π(j) ∝ exp(sharpness · max_x p_j(x))`: state-dependent through the
/// conditionals.
pub struct ConfidenceKernel {
    pub sharpness: f64,
}

impl SelectionKernel for ConfidenceKernel {
    fn probabilities(&self, _state: &MaskState, conditionals: &[(usize, Categorical)]) -> Vec<(usize, f64)> {
        let w: Vec<f64> = conditionals.iter().map(|(_, p)| (self.sharpness * p.confidence()).exp()).collect();
        let total: f64 = w.iter().sum();
        conditionals.iter().zip(w).map(|((i, _), w)| (*i, w / total)).collect()
    }
}

/// Exact output law of one-by-one choose-then-sample with kernel `kernel`
/// and inverse temperature `gamma`, by enumerating every selection order and
/// token path.
pub fn exact_cts_distribution<M: ProductModel + ?Sized, K: SelectionKernel + ?Sized>(
    model: &M,
    kernel: &K,
    gamma: f64,
) -> Result<Pmf<Vec<usize>>> {
    let d = model.seq_len();
    let s = model.alphabet_size();
    let factorial: f64 = (1..=d).map(|v| v as f64).product();
    let needed = (s as f64).powi(d as i32) * factorial;
    if needed > PATH_LIMIT {
        return Err(Error::Capacity { what: "choose-then-sample paths", needed, limit: PATH_LIMIT });
    }

    fn walk<M: ProductModel + ?Sized, K: SelectionKernel + ?Sized>(
        model: &M,
        kernel: &K,
        gamma: f64,
        state: &mut MaskState,
        mass: f64,
        out: &mut Pmf<Vec<usize>>,
    ) -> Result<()> {
        if let Some(x) = state.complete_tokens() {
            *out.entry(x).or_insert(0.0) += mass;
            return Ok(());
        }
        let conds = model.masked_conditionals(state)?;
        for (j, pj) in kernel.probabilities(state, &conds) {
            if pj <= 0.0 {
                continue;
            }
            let p = conds
                .iter()
                .find(|(i, _)| *i == j)
                .ok_or_else(|| Error::Consistency(format!("kernel chose non-masked position {j}")))?
                .1
                .temper(gamma)?;
            for (t, &pt) in p.probs().iter().enumerate() {
                if pt > 0.0 {
                    let mut next = state.clone();
                    next.unmask(j, t)?;
                    walk(model, kernel, gamma, &mut next, mass * pj * pt, out)?;
                }
            }
        }
        Ok(())
    }

    let mut out = Pmf::new();
    walk(model, kernel, gamma, &mut MaskState::new(d), 1.0, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tv_exact;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conditional_examples() {
        let q = JointTable::new(2, 2, vec![0.4, 0.1, 0.2, 0.3]).unwrap();
        let given = MaskState::from_tokens(vec![Some(0), None]);
        let c = conditional(&q, 1, &given).unwrap();
        assert!((c.prob(0) - 0.8).abs() < 1e-15 && (c.prob(1) - 0.2).abs() < 1e-15);
        let m = conditional(&q, 0, &MaskState::new(2)).unwrap();
        assert!((m.prob(0) - 0.5).abs() < 1e-15);

        let p1 = Categorical::new(vec![0.3, 0.7]).unwrap();
        let p2 = Categorical::new(vec![0.6, 0.1, 0.3]).unwrap();
        assert!(JointTable::product(&[p1.clone(), p2.clone()]).is_err());
        let p2 = Categorical::new(vec![0.6, 0.4]).unwrap();
        let q = JointTable::product(&[p1, p2.clone()]).unwrap();
        for x1 in 0..2 {
            let c = conditional(&q, 1, &MaskState::from_tokens(vec![Some(x1), None])).unwrap();
            assert!(c.probs().iter().zip(p2.probs()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_probability_condition() {
        let q = JointTable::new(2, 2, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let r = conditional(&q, 1, &MaskState::from_tokens(vec![Some(1), None]));
        assert_eq!(r, Err(Error::ZeroProbabilityCondition));
    }

    #[test]
    fn conditionals_normalize() {
        let q = JointTable::random(4, 3, &mut rng(1)).unwrap();
        let state = MaskState::from_tokens(vec![Some(2), None, Some(0), None]);
        for i in [1, 3] {
            let c = conditional(&q, i, &state).unwrap();
            assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn table_validation_and_json() {
        assert!(JointTable::new(2, 2, vec![0.5, 0.5, 0.1, 0.0]).is_err());
        assert!(JointTable::new(2, 2, vec![0.5, 0.5]).is_err());
        assert!(matches!(JointTable::random(21, 2, &mut rng(0)), Err(Error::Capacity { .. })));
        let q = JointTable::random(3, 2, &mut rng(2)).unwrap();
        let back = JointTable::from_json(&q.to_json().unwrap()).unwrap();
        assert_eq!(q, back);
        assert_eq!(q.index_of(&[1, 0, 1]), 5);
        assert_eq!(q.decode(5), vec![1, 0, 1]);
    }

    #[test]
    fn phi_examples() {
        assert!((phi_weight(2, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((phi_weight(2, 1) - 1.0 / 6.0).abs() < 1e-15);
        assert!((phi_weight(2, 2) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(phi_weight(0, 0), 1.0);
        assert!((phi_weight(3, 1) - 1.0 / 12.0).abs() < 1e-15);
        for parent in 0..=8usize {
            let mut binom = 1.0;
            let mut total = 0.0;
            for k in 0..=parent {
                total += binom * phi_weight(parent, k);
                binom = binom * (parent - k) as f64 / (k + 1) as f64;
            }
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).value, 0.0);
        let d = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]);
        assert!((d.value - 2f64.ln()).abs() < 1e-15 && !d.support_violation);
        let d = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]);
        assert!(d.value.is_infinite() && d.support_violation);
    }

    #[test]
    fn product_joint_has_no_first_round_error() {
        let mut r = rng(3);
        let margs: Vec<Categorical> = (0..4).map(|_| Categorical::random(2, &mut r)).collect();
        let q = JointTable::product(&margs).unwrap();
        let t = kl_decomposition_terms(&q, &[0, 2]).unwrap();
        assert!(t.chain_lhs.abs() < 1e-12);
        assert!(t.chain_rhs1.abs() < 1e-12);
        assert!((t.term_a - t.term_b).abs() < 1e-12);
    }

    #[test]
    fn chain_rule_and_bound() {
        for seed in 0..30 {
            let q = JointTable::random(4, 2, &mut rng(seed)).unwrap();
            let t = kl_decomposition_terms(&q, &[1, 3]).unwrap();
            assert!((t.chain_lhs - t.chain_rhs1 - t.chain_rhs2).abs() < 1e-10);
            assert!(t.chain_lhs <= t.upper_bound() + 1e-10);
            assert!((t.chain_rhs1 - (t.term_a - t.term_b)).abs() < 1e-10);
        }
    }

    #[test]
    fn permutation_average_matches_subset_weights() {
        for seed in 0..10 {
            let q = JointTable::random(4, 2, &mut rng(100 + seed)).unwrap();
            for set in [vec![0], vec![0, 3], vec![2, 0, 1], vec![0, 1, 2, 3]] {
                let a = term_b_permutation_average(&q, &set).unwrap();
                let b = term_b_subset_enumeration(&q, &set).unwrap();
                assert!((a - b).abs() < 1e-10);
                // Every ordering sums to the joint entropy of q_I.
                assert!((a - q.marginal_entropy(&set)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn exact_cts_small_cases() {
        let q = JointTable::new(1, 3, vec![0.2, 0.3, 0.5]).unwrap();
        let out = exact_cts_distribution(&q, &UniformKernel, 1.0).unwrap();
        assert!(tv_exact(&out, &q.to_pmf()) < 1e-15);

        for seed in 0..5 {
            let q = JointTable::random(3, 2, &mut rng(200 + seed)).unwrap();
            let uni = exact_cts_distribution(&q, &UniformKernel, 1.0).unwrap();
            assert!(tv_exact(&uni, &q.to_pmf()) < 1e-10);
            let conf = exact_cts_distribution(&q, &ConfidenceKernel { sharpness: 5.0 }, 1.0).unwrap();
            assert!(tv_exact(&conf, &q.to_pmf()) < 1e-10);
        }
        let q = JointTable::random(3, 2, &mut rng(300)).unwrap();
        let biased = exact_cts_distribution(&q, &UniformKernel, 2.0).unwrap();
        assert!(tv_exact(&biased, &q.to_pmf()) > 0.01);
    }

    #[test]
    fn exact_cts_with_token_dependent_kernel() {
        // Prefer the rightmost masked position once any token 1 is visible.
        let kernel = |state: &MaskState, conds: &[(usize, Categorical)]| {
            let ones = state.tokens().iter().filter(|t| **t == Some(1)).count();
            let w: Vec<f64> = conds.iter().map(|(i, _)| 1.0 + (ones * i) as f64).collect();
            let total: f64 = w.iter().sum();
            conds.iter().zip(w).map(|((i, _), w)| (*i, w / total)).collect::<Vec<_>>()
        };
        let q = JointTable::random(4, 2, &mut rng(5)).unwrap();
        let out = exact_cts_distribution(&q, &kernel, 1.0).unwrap();
        assert!(tv_exact(&out, &q.to_pmf()) < 1e-10);
    }

    #[test]
    fn path_guard() {
        let q = JointTable::random(8, 3, &mut rng(0)).unwrap();
        assert!(matches!(exact_cts_distribution(&q, &UniformKernel, 1.0), Err(Error::Capacity { .. })));
    }
}
