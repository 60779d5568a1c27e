//! Multi-round drivers: general choose-then-sample, the MaskGIT chain, and
//! choose-then-sample with partial KV caching on the toy transformer.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use num_traits::Float;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::dist::{Categorical, ProductModel};
use crate::error::{Error, Result};
use crate::nanoformer::Nanoformer;
use crate::policies::{MomentPolicy, OrderingPolicy, RoundContext, UnmaskOrder};
use crate::rounds::maskgit_round;
use crate::schedules::{gumbel_temp, UnmaskSchedule};

/// A partially unmasked sequence: tokens are known exactly on the unmasked
/// set `J`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskState {
    tokens: Vec<Option<usize>>,
}

impl MaskState {
    pub fn new(seq_len: usize) -> Self {
        Self { tokens: vec![None; seq_len] }
    }

    pub fn from_tokens(tokens: Vec<Option<usize>>) -> Self {
        Self { tokens }
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, i: usize) -> Option<usize> {
        self.tokens[i]
    }

    pub fn tokens(&self) -> &[Option<usize>] {
        &self.tokens
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i].is_none()
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.tokens[i].is_none()).collect()
    }

    pub fn unmasked(&self) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&i| self.tokens[i].is_some()).collect()
    }

    pub fn is_complete(&self) -> bool {
        self.tokens.iter().all(Option::is_some)
    }

    /// Commits `token` at a masked position.
    pub fn unmask(&mut self, i: usize, token: usize) -> Result<()> {
        match self.tokens.get(i) {
            None => Err(Error::Argument(format!("position {i} outside 0..{}", self.tokens.len()))),
            Some(Some(_)) => Err(Error::Consistency(format!("position {i} is already unmasked"))),
            Some(None) => {
                self.tokens[i] = Some(token);
                Ok(())
            }
        }
    }

    pub fn with(&self, commits: &[(usize, usize)]) -> Result<Self> {
        let mut s = self.clone();
        for &(i, t) in commits {
            s.unmask(i, t)?;
        }
        Ok(s)
    }

    /// Identity tag used to bind KV caches to the state they came from.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.tokens.hash(&mut h);
        h.finish()
    }

    /// The full sequence, once every position is unmasked.
    pub fn complete_tokens(&self) -> Option<Vec<usize>> {
        self.tokens.iter().copied().collect()
    }
}

/// Inverse sampling temperature per step. The final step always samples
/// with `γ = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaSchedule {
    Constant(f64),
    /// `γ_n = 1 + 1/α_n` with `α_n = α (1 - n/N)`, mirroring MaskGIT's
    /// implicit temperature.
    MaskgitEmulation { alpha: f64 },
}

impl GammaSchedule {
    pub fn at(&self, n: usize, steps: usize) -> f64 {
        if n == steps {
            return 1.0;
        }
        match *self {
            GammaSchedule::Constant(g) => g,
            GammaSchedule::MaskgitEmulation { alpha } => 1.0 + 1.0 / gumbel_temp(alpha, n, steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub n: usize,
    pub indices: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Gumbel temperature `α_n` of the MaskGIT schedule being run or
    /// emulated; `None` for constant-γ runs.
    pub temperature: Option<f64>,
    pub gamma: f64,
    /// Per selected index: was its token drawn from refreshed (partially
    /// recomputed) conditionals.
    pub refreshed: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub rounds: Vec<RoundRecord>,
    pub tokens: Vec<usize>,
}

impl GenerationTrace {
    /// Every position unmasked exactly once across rounds.
    pub fn covers_each_position_once(&self) -> bool {
        let mut seen = vec![0usize; self.tokens.len()];
        for r in &self.rounds {
            for &i in &r.indices {
                match seen.get_mut(i) {
                    Some(c) => *c += 1,
                    None => return false,
                }
            }
        }
        seen.iter().all(|&c| c == 1)
    }
}

fn check_schedule(schedule: &UnmaskSchedule, seq_len: usize) -> Result<()> {
    if schedule.seq_len != seq_len {
        return Err(Error::Argument(format!(
            "schedule covers {} positions, model has {seq_len}",
            schedule.seq_len
        )));
    }
    Ok(())
}

/// Checks that the policy returned a permutation of the masked positions
/// and returns the first `take` entries.
fn checked_prefix(order: &UnmaskOrder, state: &MaskState, take: usize) -> Result<Vec<usize>> {
    let mut seen = vec![false; state.seq_len()];
    for &i in order.positions() {
        if i >= state.seq_len() || !state.is_masked(i) {
            return Err(Error::Consistency(format!("policy returned non-masked position {i}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Consistency(format!("policy returned position {i} twice")));
        }
    }
    if order.len() != state.masked().len() {
        return Err(Error::Consistency("policy ordering does not cover every masked position".into()));
    }
    Ok(order.prefix(take).to_vec())
}

fn lookup(conds: &[(usize, Categorical)], i: usize) -> &Categorical {
    let at = conds.binary_search_by_key(&i, |(p, _)| *p).expect("conditional for masked position");
    &conds[at].1
}

fn emulated_alpha(gamma: &GammaSchedule, n: usize, steps: usize) -> Option<f64> {
    match gamma {
        GammaSchedule::MaskgitEmulation { alpha } => Some(gumbel_temp(*alpha, n, steps)),
        GammaSchedule::Constant(_) => None,
    }
}

/// General choose-then-sample: per round, query the conditionals at every
/// masked position, rank them with `policy`, take the schedule's `|I_n|`
/// leading positions and draw each from `p^γ_n / ‖p‖^γ_n`.
pub fn run_cts<M: ProductModel + ?Sized>(
    model: &M,
    policy: &mut dyn OrderingPolicy,
    schedule: &UnmaskSchedule,
    gamma: &GammaSchedule,
    rng: &mut dyn RngCore,
) -> Result<GenerationTrace> {
    check_schedule(schedule, model.seq_len())?;
    let mut state = MaskState::new(model.seq_len());
    let mut rounds = Vec::with_capacity(schedule.steps);
    for (n, size) in (1..=schedule.steps).zip(schedule.sizes()) {
        if size == 0 {
            continue;
        }
        let conds = model.masked_conditionals(&state)?;
        let ctx = RoundContext { state: &state, conditionals: &conds, step: n, steps: schedule.steps, round_size: size };
        let order = policy.order(&ctx, rng)?;
        let chosen = checked_prefix(&order, &state, size)?;
        let g = gamma.at(n, schedule.steps);
        let mut tokens = Vec::with_capacity(size);
        for &i in &chosen {
            tokens.push(lookup(&conds, i).temper(g)?.sample(rng));
        }
        for (&i, &t) in chosen.iter().zip(&tokens) {
            state.unmask(i, t)?;
        }
        rounds.push(RoundRecord {
            n,
            refreshed: vec![false; chosen.len()],
            indices: chosen,
            tokens,
            temperature: emulated_alpha(gamma, n, schedule.steps),
            gamma: g,
        });
    }
    finish(state, rounds)
}

fn finish(state: MaskState, rounds: Vec<RoundRecord>) -> Result<GenerationTrace> {
    let tokens = state
        .complete_tokens()
        .ok_or_else(|| Error::Consistency("schedule ended with masked positions".into()))?;
    Ok(GenerationTrace { rounds, tokens })
}

/// Multi-round MaskGIT: each round runs the sample-then-choose round on the
/// current conditionals with `α_n = α (1 - n/N)`.
pub fn run_maskgit_chain<M: ProductModel + ?Sized>(
    model: &M,
    schedule: &UnmaskSchedule,
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<GenerationTrace> {
    check_schedule(schedule, model.seq_len())?;
    let mut state = MaskState::new(model.seq_len());
    let mut rounds = Vec::with_capacity(schedule.steps);
    for (n, size) in (1..=schedule.steps).zip(schedule.sizes()) {
        if size == 0 {
            continue;
        }
        let conds = model.masked_conditionals(&state)?;
        let (positions, ps): (Vec<usize>, Vec<Categorical>) = conds.into_iter().unzip();
        let alpha_n = gumbel_temp(alpha, n, schedule.steps);
        let outcome = maskgit_round(&ps, size, alpha_n, rng)?;
        let indices: Vec<usize> = outcome.indices.iter().map(|&i| positions[i]).collect();
        for (&i, &t) in indices.iter().zip(&outcome.tokens) {
            state.unmask(i, t)?;
        }
        rounds.push(RoundRecord {
            n,
            refreshed: vec![false; indices.len()],
            indices,
            tokens: outcome.tokens,
            temperature: Some(alpha_n),
            gamma: 1.0,
        });
    }
    finish(state, rounds)
}

/// The moment-sampler chain that approximates [`run_maskgit_chain`]:
/// moment ordering with `β_n = 1 + 1/α_n` and tokens tempered by `γ_n = β_n`.
pub fn run_moment_chain<M: ProductModel + ?Sized>(
    model: &M,
    schedule: &UnmaskSchedule,
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<GenerationTrace> {
    run_moment_chain_with(model, schedule, alpha, true, rng)
}

/// [`run_moment_chain`] with a choice of whether the last round ranks
/// positions without noise (`true`) or keeps unit-temperature noise.
pub fn run_moment_chain_with<M: ProductModel + ?Sized>(
    model: &M,
    schedule: &UnmaskSchedule,
    alpha: f64,
    final_deterministic: bool,
    rng: &mut dyn RngCore,
) -> Result<GenerationTrace> {
    let mut policy = MomentPolicy { final_deterministic, ..MomentPolicy::scheduled(alpha) };
    run_cts(model, &mut policy, schedule, &GammaSchedule::MaskgitEmulation { alpha }, rng)
}

/// How a round `I_n` is split into the part sampled from the full forward
/// (`A_n`) and the part sampled from refreshed conditionals (`B_n`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheSplit {
    /// `|A_n| = |J_{n-1/2}| - |J_{n-1}|` from the schedule's half steps.
    HalfStep,
    /// `|A_n| = ceil(|I_n| / 2)`.
    CeilHalf,
    /// `A_n = ∅`: no refresh, equivalent to [`run_cts`].
    NoRefresh,
}

/// Choose-then-sample with partial caching: the leading `A_n` of each
/// round's ordering is drawn from the full forward; the transformer is then
/// re-run only at `I_n` (cached keys/values elsewhere) and `B_n` is drawn
/// from the refreshed conditionals.
pub fn run_cts_cached<F: Float + Send + Sync>(
    model: &Nanoformer<F>,
    policy: &mut dyn OrderingPolicy,
    schedule: &UnmaskSchedule,
    gamma: &GammaSchedule,
    split: CacheSplit,
    rng: &mut dyn RngCore,
) -> Result<GenerationTrace> {
    check_schedule(schedule, model.seq_len())?;
    let halves = schedule.half_step_counts();
    let mut state = MaskState::new(model.seq_len());
    let mut rounds = Vec::with_capacity(schedule.steps);
    for (n, size) in (1..=schedule.steps).zip(schedule.sizes()) {
        if size == 0 {
            continue;
        }
        let (full, cache) = model.full_forward(&state);
        let conds = model.conditionals_from(&full, &state.masked())?;
        let ctx = RoundContext { state: &state, conditionals: &conds, step: n, steps: schedule.steps, round_size: size };
        let order = policy.order(&ctx, rng)?;
        let chosen = checked_prefix(&order, &state, size)?;
        let a_len = match split {
            CacheSplit::HalfStep => halves[n - 1] - schedule.cumulative[n - 1],
            CacheSplit::CeilHalf => size.div_ceil(2),
            CacheSplit::NoRefresh => 0,
        }
        .min(size);
        let g = gamma.at(n, schedule.steps);

        let mut tokens = Vec::with_capacity(size);
        for &i in &chosen[..a_len] {
            tokens.push(lookup(&conds, i).temper(g)?.sample(rng));
        }
        let committed: Vec<(usize, usize)> = chosen[..a_len].iter().copied().zip(tokens.iter().copied()).collect();
        if a_len > 0 && a_len < size {
            let refreshed = model.partial_forward(&cache, &state, &chosen, &committed)?;
            let b_conds = model.conditionals_from_partial(&refreshed)?;
            for &i in &chosen[a_len..] {
                tokens.push(lookup(&b_conds, i).temper(g)?.sample(rng));
            }
        } else {
            for &i in &chosen[a_len..] {
                tokens.push(lookup(&conds, i).temper(g)?.sample(rng));
            }
        }
        for (&i, &t) in chosen.iter().zip(&tokens) {
            state.unmask(i, t)?;
        }
        let refreshed_flags = (0..size).map(|s| a_len > 0 && s >= a_len).collect();
        rounds.push(RoundRecord {
            n,
            indices: chosen,
            tokens,
            temperature: emulated_alpha(gamma, n, schedule.steps),
            gamma: g,
            refreshed: refreshed_flags,
        });
    }
    finish(state, rounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{tv_empirical, EmpiricalPmf};
    use crate::nanoformer::{NanoConfig, TransformerParams};
    use crate::oracle::JointTable;
    use crate::policies::{ConfidencePolicy, Halton1dPolicy, HybridPolicy, RandomPolicy};
    use crate::schedules::{unmask_counts, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(seed: u64) -> JointTable {
        JointTable::random(3, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn mask_state_basics() {
        let mut s = MaskState::new(3);
        assert_eq!(s.masked(), vec![0, 1, 2]);
        s.unmask(1, 4).unwrap();
        assert_eq!(s.unmasked(), vec![1]);
        assert!(s.unmask(1, 0).is_err());
        assert!(s.unmask(5, 0).is_err());
        assert_ne!(s.fingerprint(), MaskState::new(3).fingerprint());
        assert_eq!(s.complete_tokens(), None);
    }

    #[test]
    fn single_position_draws_marginal() {
        let q = JointTable::new(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let sched = unmask_counts(ScheduleKind::Uniform, 1, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emp: EmpiricalPmf<Vec<usize>> = (0..200_000)
            .map(|_| run_cts(&q, &mut RandomPolicy, &sched, &GammaSchedule::Constant(1.0), &mut rng).unwrap().tokens)
            .collect();
        assert!(tv_empirical(&emp, &q.to_pmf()) < 0.01);
    }

    #[test]
    fn one_by_one_cts_recovers_joint() {
        let q = table(1);
        let sched = unmask_counts(ScheduleKind::Uniform, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emp: EmpiricalPmf<Vec<usize>> = (0..1_000_000)
            .map(|_| run_cts(&q, &mut ConfidencePolicy, &sched, &GammaSchedule::Constant(1.0), &mut rng).unwrap().tokens)
            .collect();
        let tv = tv_empirical(&emp, &q.to_pmf());
        assert!(tv < 0.01, "tv {tv}");
    }

    #[test]
    fn huge_gamma_decodes_greedily() {
        let q = JointTable::random(4, 3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let sched = unmask_counts(ScheduleKind::Uniform, 4, 2).unwrap();
        let trace = run_cts(&q, &mut Halton1dPolicy, &sched, &GammaSchedule::Constant(1e6), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        // Replay the trajectory: the first round must pick the argmax tokens.
        let first = &trace.rounds[0];
        let empty = MaskState::new(4);
        for (&i, &t) in first.indices.iter().zip(&first.tokens) {
            assert_eq!(q.conditional(&empty, i).unwrap().argmax(), t);
        }
    }

    #[test]
    fn policy_errors_abort() {
        struct Bad;
        impl OrderingPolicy for Bad {
            fn name(&self) -> String {
                "bad".into()
            }
            fn order(&mut self, ctx: &RoundContext<'_>, _rng: &mut dyn RngCore) -> Result<UnmaskOrder> {
                let mut v: Vec<usize> = ctx.state.unmasked();
                v.extend(ctx.state.masked());
                Ok(UnmaskOrder(v))
            }
        }
        let q = table(2);
        let sched = unmask_counts(ScheduleKind::Uniform, 3, 3).unwrap();
        let r = run_cts(&q, &mut Bad, &sched, &GammaSchedule::Constant(1.0), &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Consistency(_))));
    }

    #[test]
    fn traces_are_deterministic_and_cover() {
        let q = JointTable::random(5, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let sched = unmask_counts(ScheduleKind::Cosine, 5, 3).unwrap();
        let run = |seed| {
            let mut p = HybridPolicy { explore: Box::new(Halton1dPolicy), exploit: Box::new(MomentPolicy::fixed(2.0)) };
            run_cts(&q, &mut p, &sched, &GammaSchedule::Constant(2.0), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
        };
        assert_eq!(run(9), run(9));
        assert!(run(9).covers_each_position_once());
        let m = run_maskgit_chain(&q, &sched, 3.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(m.covers_each_position_once());
    }

    #[test]
    fn final_round_noise_switch() {
        // With β = 1 every position ties, so a noiseless last round keeps
        // index order while a noisy one shuffles it.
        let q = JointTable::random(4, 2, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let sched = unmask_counts(ScheduleKind::Uniform, 4, 1).unwrap();
        let last = |det, seed| {
            let t = run_moment_chain_with(&q, &sched, 2.0, det, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            t.rounds[0].indices.clone()
        };
        assert!((0..20).all(|s| last(true, s) == vec![0, 1, 2, 3]));
        assert!((0..20).any(|s| last(false, s) != vec![0, 1, 2, 3]));
    }

    #[test]
    fn single_round_maskgit_is_product() {
        let q = JointTable::random(2, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let sched = unmask_counts(ScheduleKind::Uniform, 2, 1).unwrap();
        let m0 = q.conditional(&MaskState::new(2), 0).unwrap();
        let m1 = q.conditional(&MaskState::new(2), 1).unwrap();
        let product = JointTable::product(&[m0, m1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let emp: EmpiricalPmf<Vec<usize>> = (0..400_000)
            .map(|_| run_maskgit_chain(&q, &sched, 2.0, &mut rng).unwrap().tokens)
            .collect();
        assert!(tv_empirical(&emp, &product.to_pmf()) < 0.01);
    }

    #[test]
    fn cached_without_refresh_equals_plain_cts() {
        let cfg = NanoConfig { layers: 2, d_model: 16, d_k: 8, d_ff: 32, alphabet: 5, seq_len: 8, ..NanoConfig::default() };
        let model: Nanoformer<f64> = Nanoformer::new(TransformerParams::init(7, cfg).unwrap());
        let sched = unmask_counts(ScheduleKind::Uniform, 8, 4).unwrap();
        let g = GammaSchedule::Constant(1.5);
        let a = run_cts(&model, &mut MomentPolicy::fixed(2.0), &sched, &g, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = run_cts_cached(&model, &mut MomentPolicy::fixed(2.0), &sched, &g, CacheSplit::NoRefresh, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let c = run_cts_cached(&model, &mut MomentPolicy::fixed(2.0), &sched, &g, CacheSplit::CeilHalf, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(c.covers_each_position_once());
        assert!(c.rounds.iter().all(|r| r.refreshed.iter().filter(|&&f| f).count() == r.indices.len() / 2));
    }
}
