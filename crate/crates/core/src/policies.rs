//! Ordering policies: each ranks every currently masked position, and the
//! drivers unmask a schedule-sized prefix of the ranking.

use rand::{Rng, RngCore};

use crate::cts::MaskState;
use crate::dist::Categorical;
use crate::error::{Error, Result};
use crate::gumbel::{argsort_desc, sample_gumbel};
use crate::schedules::{gumbel_temp, hybrid_m};

/// Jitter scale used by [`order_confidence`] to break exact ties at random.
pub const CONFIDENCE_JITTER: f64 = 1e-12;

/// An ordered list of distinct masked positions covering every masked
/// position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnmaskOrder(pub Vec<usize>);

impl UnmaskOrder {
    pub fn positions(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prefix(&self, n: usize) -> &[usize] {
        &self.0[..n.min(self.0.len())]
    }

    fn sorted(&self) -> Vec<usize> {
        let mut v = self.0.clone();
        v.sort_unstable();
        v
    }
}

/// Everything a policy may look at when ranking the masked positions of one
/// round.
pub struct RoundContext<'a> {
    pub state: &'a MaskState,
    /// Conditionals at the masked positions, increasing position order.
    pub conditionals: &'a [(usize, Categorical)],
    /// 1-based step index `n`.
    pub step: usize,
    pub steps: usize,
    /// `|I_n|` for this step.
    pub round_size: usize,
}

pub trait OrderingPolicy: Send {
    fn name(&self) -> String;

    fn order(&mut self, ctx: &RoundContext<'_>, rng: &mut dyn RngCore) -> Result<UnmaskOrder>;
}

fn shuffle<R: Rng + ?Sized>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Uniformly random permutation of `masked`.
pub fn order_random<R: Rng + ?Sized>(masked: &[usize], rng: &mut R) -> Result<UnmaskOrder> {
    if masked.is_empty() {
        return Err(Error::Argument("no masked position to order".into()));
    }
    let mut v = masked.to_vec();
    shuffle(&mut v, rng);
    Ok(UnmaskOrder(v))
}

fn order_by_scores(positions: &[usize], scores: &[f64]) -> UnmaskOrder {
    UnmaskOrder(argsort_desc(scores).into_iter().map(|i| positions[i]).collect())
}

/// Descending max-probability with tiny Gumbel jitter for ties.
pub fn order_confidence<R: Rng + ?Sized>(probs: &[(usize, Categorical)], rng: &mut R) -> UnmaskOrder {
    let positions: Vec<usize> = probs.iter().map(|(i, _)| *i).collect();
    let scores: Vec<f64> = probs
        .iter()
        .map(|(_, p)| p.confidence() + CONFIDENCE_JITTER * sample_gumbel(rng))
        .collect();
    order_by_scores(&positions, &scores)
}

/// Ranks by `log ‖p_i‖_β^β + τ ξ_i`; `τ = 1` is the moment sampler's
/// selection extended to a full permutation.
pub fn order_moment_with<R: Rng + ?Sized>(
    probs: &[(usize, Categorical)],
    beta: f64,
    tau: f64,
    rng: &mut R,
) -> UnmaskOrder {
    let positions: Vec<usize> = probs.iter().map(|(i, _)| *i).collect();
    let scores: Vec<f64> = probs
        .iter()
        .map(|(_, p)| {
            let xi = sample_gumbel(rng);
            p.log_power_sum(beta) + tau * xi
        })
        .collect();
    order_by_scores(&positions, &scores)
}

pub fn order_moment<R: Rng + ?Sized>(
    probs: &[(usize, Categorical)],
    beta: f64,
    rng: &mut R,
) -> Result<UnmaskOrder> {
    if !(beta >= 1.0) {
        return Err(Error::Argument(format!("moment ordering needs beta >= 1, got {beta}")));
    }
    Ok(order_moment_with(probs, beta, 1.0, rng))
}

/// Radical inverse of `t` in `base` (van der Corput / Halton coordinate).
pub fn radical_inverse(mut t: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut v = 0.0;
    while t > 0 {
        v += (t % base) as f64 * inv;
        t /= base;
        inv /= base as f64;
    }
    v
}

fn mask_flags(seq_len: usize, masked: &[usize]) -> Result<Vec<bool>> {
    let mut flags = vec![false; seq_len];
    for &i in masked {
        if i >= seq_len {
            return Err(Error::Argument(format!("position {i} outside 0..{seq_len}")));
        }
        flags[i] = true;
    }
    Ok(flags)
}

/// Positions visited by the base-2 van der Corput sequence scaled to
/// `0..seq_len`, duplicates dropped and filtered to `masked`. For a
/// power-of-two length this is the bit-reversal permutation.
pub fn order_halton_1d(seq_len: usize, masked: &[usize]) -> Result<UnmaskOrder> {
    let mut wanted = mask_flags(seq_len, masked)?;
    let mut remaining = wanted.iter().filter(|&&w| w).count();
    let mut out = Vec::with_capacity(remaining);
    let mut t = 0u64;
    while remaining > 0 {
        let cell = (radical_inverse(t, 2) * seq_len as f64) as usize;
        if wanted[cell] {
            wanted[cell] = false;
            out.push(cell);
            remaining -= 1;
        }
        t += 1;
    }
    Ok(UnmaskOrder(out))
}

/// Cells of a `rows × cols` grid (row-major positions) in the order of the
/// 2D Halton sequence with bases 2 (rows) and 3 (columns).
pub fn order_halton_2d(rows: usize, cols: usize, seq_len: usize, masked: &[usize]) -> Result<UnmaskOrder> {
    if rows * cols != seq_len || rows == 0 {
        return Err(Error::Argument(format!("grid {rows}x{cols} does not cover {seq_len} positions")));
    }
    let mut wanted = mask_flags(seq_len, masked)?;
    let mut remaining = wanted.iter().filter(|&&w| w).count();
    let mut out = Vec::with_capacity(remaining);
    let mut t = 0u64;
    while remaining > 0 {
        let r = (radical_inverse(t, 2) * rows as f64) as usize;
        let c = (radical_inverse(t, 3) * cols as f64) as usize;
        let cell = r * cols + c;
        if wanted[cell] {
            wanted[cell] = false;
            out.push(cell);
            remaining -= 1;
        }
        t += 1;
    }
    Ok(UnmaskOrder(out))
}

/// First `m` entries of `explore`, then `exploit` in its own order skipping
/// what was already taken. Only the first `n` entries get unmasked.
pub fn merge_orderings(explore: &UnmaskOrder, exploit: &UnmaskOrder, n: usize, m: usize) -> Result<UnmaskOrder> {
    if explore.sorted() != exploit.sorted() {
        return Err(Error::Argument("orderings cover different position sets".into()));
    }
    if m > n || n > explore.len() {
        return Err(Error::Argument(format!(
            "need m <= n <= {}, got m = {m}, n = {n}",
            explore.len()
        )));
    }
    let mut taken: Vec<usize> = explore.prefix(m).to_vec();
    for &j in exploit.positions() {
        if !taken[..m].contains(&j) {
            taken.push(j);
        }
    }
    Ok(UnmaskOrder(taken))
}

fn masked_positions(ctx: &RoundContext<'_>) -> Vec<usize> {
    ctx.conditionals.iter().map(|(i, _)| *i).collect()
}

pub struct RandomPolicy;

impl OrderingPolicy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn order(&mut self, ctx: &RoundContext<'_>, rng: &mut dyn RngCore) -> Result<UnmaskOrder> {
        order_random(&masked_positions(ctx), rng)
    }
}

pub struct ConfidencePolicy;

impl OrderingPolicy for ConfidencePolicy {
    fn name(&self) -> String {
        "confidence".into()
    }

    fn order(&mut self, ctx: &RoundContext<'_>, rng: &mut dyn RngCore) -> Result<UnmaskOrder> {
        Ok(order_confidence(ctx.conditionals, rng))
    }
}

/// How the moment ordering picks its exponent β.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentBeta {
    Fixed(f64),
    /// `β_n = 1 + 1/α_n` with `α_n = α (1 - n/N)`.
    Scheduled { alpha: f64 },
}

pub struct MomentPolicy {
    pub beta: MomentBeta,
    /// Rank the final step without noise (and with β = 1).
    pub final_deterministic: bool,
}

impl MomentPolicy {
    pub fn fixed(beta: f64) -> Self {
        Self { beta: MomentBeta::Fixed(beta), final_deterministic: true }
    }

    pub fn scheduled(alpha: f64) -> Self {
        Self { beta: MomentBeta::Scheduled { alpha }, final_deterministic: true }
    }
}

impl OrderingPolicy for MomentPolicy {
    fn name(&self) -> String {
        "moment".into()
    }

    fn order(&mut self, ctx: &RoundContext<'_>, rng: &mut dyn RngCore) -> Result<UnmaskOrder> {
        let last = ctx.step == ctx.steps;
        let beta = match self.beta {
            MomentBeta::Fixed(b) => b,
            MomentBeta::Scheduled { .. } if last => 1.0,
            MomentBeta::Scheduled { alpha } => 1.0 + 1.0 / gumbel_temp(alpha, ctx.step, ctx.steps),
        };
        if !(beta >= 1.0) {
            return Err(Error::Argument(format!("moment ordering needs beta >= 1, got {beta}")));
        }
        let tau = if last && self.final_deterministic { 0.0 } else { 1.0 };
        Ok(order_moment_with(ctx.conditionals, beta, tau, rng))
    }
}

pub struct Halton1dPolicy;

impl OrderingPolicy for Halton1dPolicy {
    fn name(&self) -> String {
        "halton".into()
    }

    fn order(&mut self, ctx: &RoundContext<'_>, _rng: &mut dyn RngCore) -> Result<UnmaskOrder> {
        order_halton_1d(ctx.state.seq_len(), &masked_positions(ctx))
    }
}

pub struct Halton2dPolicy {
    pub rows: usize,
    pub cols: usize,
}

impl OrderingPolicy for Halton2dPolicy {
    fn name(&self) -> String {
        format!("halton2d-{}x{}", self.rows, self.cols)
    }

    fn order(&mut self, ctx: &RoundContext<'_>, _rng: &mut dyn RngCore) -> Result<UnmaskOrder> {
        order_halton_2d(self.rows, self.cols, ctx.state.seq_len(), &masked_positions(ctx))
    }
}

/// Starts from the exploration ordering and hands over to the exploitation
/// ordering: `m_n = round((1 - n/N) |I_n|)` entries come from `explore`.
pub struct HybridPolicy {
    pub explore: Box<dyn OrderingPolicy>,
    pub exploit: Box<dyn OrderingPolicy>,
}

impl OrderingPolicy for HybridPolicy {
    fn name(&self) -> String {
        format!("hybrid({}+{})", self.explore.name(), self.exploit.name())
    }

    fn order(&mut self, ctx: &RoundContext<'_>, rng: &mut dyn RngCore) -> Result<UnmaskOrder> {
        let i = self.explore.order(ctx, rng)?;
        let j = self.exploit.order(ctx, rng)?;
        let n = ctx.round_size.min(i.len());
        let m = hybrid_m(ctx.step, ctx.steps, n);
        merge_orderings(&i, &j, n, m)
    }
}
