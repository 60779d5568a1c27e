//! Total variation distances, empirical pmfs and the sentence-entropy
//! diversity metric.

use std::collections::BTreeMap;

/// A probability mass function over arbitrary ordered outcomes. Absent keys
/// carry zero mass.
pub type Pmf<K> = BTreeMap<K, f64>;

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// `½ Σ |p − q|` over the union of supports.
pub fn tv_exact<K: Ord>(p: &Pmf<K>, q: &Pmf<K>) -> f64 {
    let from_p = p.iter().map(|(k, &pv)| (pv - q.get(k).copied().unwrap_or(0.0)).abs());
    let only_q = q.iter().filter(|(k, _)| !p.contains_key(k)).map(|(_, &qv)| qv.abs());
    0.5 * compensated_sum(from_p.chain(only_q))
}

/// Draw counts per outcome.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmpiricalPmf<K: Ord> {
    counts: BTreeMap<K, u64>,
    total: u64,
}

impl<K: Ord> Default for EmpiricalPmf<K> {
    fn default() -> Self {
        Self { counts: BTreeMap::new(), total: 0 }
    }
}

impl<K: Ord + Clone> EmpiricalPmf<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, outcome: K) {
        *self.counts.entry(outcome).or_insert(0) += 1;
        self.total += 1;
    }

    /// Adds another tally into this one.
    pub fn merge(&mut self, other: EmpiricalPmf<K>) {
        for (k, c) in other.counts {
            *self.counts.entry(k).or_insert(0) += c;
        }
        self.total += other.total;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &BTreeMap<K, u64> {
        &self.counts
    }

    pub fn count(&self, outcome: &K) -> u64 {
        self.counts.get(outcome).copied().unwrap_or(0)
    }

    /// Relative frequencies.
    pub fn to_pmf(&self) -> Pmf<K> {
        let n = self.total as f64;
        self.counts.iter().map(|(k, &c)| (k.clone(), c as f64 / n)).collect()
    }
}

impl<K: Ord + Clone> FromIterator<K> for EmpiricalPmf<K> {
    fn from_iter<T: IntoIterator<Item = K>>(iter: T) -> Self {
        let mut e = Self::new();
        for k in iter {
            e.record(k);
        }
        e
    }
}

/// Plug-in TV between the empirical frequencies and `q`.
pub fn tv_empirical<K: Ord + Clone>(samples: &EmpiricalPmf<K>, q: &Pmf<K>) -> f64 {
    assert!(samples.total() > 0, "empirical pmf needs at least one draw");
    tv_exact(&samples.to_pmf(), q)
}

/// Scale of the plug-in estimation error, `sqrt(support / draws)`.
pub fn tv_error_scale(support: usize, draws: u64) -> f64 {
    (support as f64 / draws as f64).sqrt()
}

/// Entropy (nats) of the empirical token frequencies within one sequence.
pub fn sequence_entropy(tokens: &[usize]) -> f64 {
    assert!(!tokens.is_empty(), "sequence must be non-empty");
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_insert(0) += 1;
    }
    let d = tokens.len() as f64;
    -counts
        .values()
        .map(|&c| {
            let f = c as f64 / d;
            f * f.ln()
        })
        .sum::<f64>()
}
