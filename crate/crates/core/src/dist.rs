//! Categorical distributions over a finite token alphabet and the scalar
//! functionals the samplers consume: entropy, β-power sums, tempering and
//! confidence.
//!
//! Probabilities are stored in linear space. Functionals that raise
//! probabilities to a power go through log-space so that large exponents
//! neither overflow nor underflow to a zero normalizer.

use rand::Rng;

use crate::cts::MaskState;
use crate::error::{Error, Result};

/// Absolute tolerance for "sums to one".
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over the alphabet `0..len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates `probs` (non-negative, finite, sums to one within [`SUM_TOLERANCE`]).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("empty alphabet".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("entry {bad} is not a probability")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("entries sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution("weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || total <= 0.0 {
            return Err(Error::InvalidDistribution("no positive weight".into()));
        }
        Ok(Self { probs: weights.into_iter().map(|w| w / total).collect() })
    }

    /// Softmax of `logits`. `-inf` logits yield zero-probability entries.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidDistribution("no finite logit".into()));
        }
        Self::from_weights(logits.iter().map(|l| (l - max).exp()).collect())
    }

    pub fn uniform(size: usize) -> Self {
        assert!(size > 0, "alphabet must be non-empty");
        Self { probs: vec![1.0 / size as f64; size] }
    }

    pub fn one_hot(size: usize, at: usize) -> Self {
        assert!(at < size, "one-hot index {at} outside alphabet of size {size}");
        let mut probs = vec![0.0; size];
        probs[at] = 1.0;
        Self { probs }
    }

    /// A draw from the flat Dirichlet over `size` symbols.
    pub fn random<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Self {
        let weights = (0..size)
            .map(|_| -(1.0 - rng.random::<f64>()).ln() + f64::MIN_POSITIVE)
            .collect();
        Self::from_weights(weights).expect("exponential weights are positive")
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    /// Alphabet size |S|.
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Shannon entropy in nats, with `0 log 0 = 0`.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    /// `log Σ_x p(x)^β`, via log-sum-exp over the support.
    pub fn log_power_sum(&self, beta: f64) -> f64 {
        log_sum_exp(self.probs.iter().filter(|&&p| p > 0.0).map(|&p| beta * p.ln()))
    }

    /// `‖p‖_β^β = Σ_x p(x)^β`.
    pub fn power_sum(&self, beta: f64) -> f64 {
        self.log_power_sum(beta).exp()
    }

    /// `p^γ / ‖p‖_γ^γ`. `γ = 1` returns an exact copy; zero entries stay zero.
    pub fn temper(&self, gamma: f64) -> Result<Categorical> {
        if !(gamma > 0.0) {
            return Err(Error::Argument(format!("temper exponent must be positive, got {gamma}")));
        }
        if self.probs.iter().all(|&p| p == 0.0) {
            return Err(Error::InvalidDistribution("all-zero input".into()));
        }
        if gamma == 1.0 {
            return Ok(self.clone());
        }
        let max_log = self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p.ln())
            .fold(f64::NEG_INFINITY, f64::max);
        let weights = self
            .probs
            .iter()
            .map(|&p| if p > 0.0 { (gamma * (p.ln() - max_log)).exp() } else { 0.0 })
            .collect();
        Categorical::from_weights(weights)
    }

    /// Largest single-token probability.
    pub fn confidence(&self) -> f64 {
        self.probs.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the most probable token, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Inverse-CDF draw from a single uniform `u` in `[0, 1)`.
    pub fn sample_with_uniform(&self, u: f64) -> usize {
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                last_positive = i;
                cum += p;
                if u < cum {
                    return i;
                }
            }
        }
        // u fell past the accumulated mass through rounding.
        last_positive
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.sample_with_uniform(rng.random::<f64>())
    }
}

/// Numerically stable `log Σ exp(v)`; `-inf` for an empty iterator.
pub fn log_sum_exp<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// A denoising model queried one position at a time: `p_{i|J}(· | x_J)`.
///
/// The product approximation treats the returned per-position conditionals
/// as independent given the unmasked tokens.
pub trait ProductModel {
    fn seq_len(&self) -> usize;

    fn alphabet_size(&self) -> usize;

    /// Conditional at masked position `i` given the unmasked tokens of `state`.
    fn conditional(&self, state: &MaskState, i: usize) -> Result<Categorical>;

    /// Conditionals for every masked position, in increasing position order.
    /// Models that compute all positions in one pass should override this.
    fn masked_conditionals(&self, state: &MaskState) -> Result<Vec<(usize, Categorical)>> {
        state
            .masked()
            .into_iter()
            .map(|i| self.conditional(state, i).map(|p| (i, p)))
            .collect()
    }
}
