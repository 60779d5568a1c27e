//! Unmasking-size schedules and the step-dependent temperatures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Cosine,
    Uniform,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Argument(format!("unknown schedule kind '{other}'"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Uniform => "uniform",
        })
    }
}

impl ScheduleKind {
    /// Fraction unmasked at (possibly fractional) step `t` of `steps`.
    fn fraction(self, t: f64, steps: usize) -> f64 {
        let r = t / steps as f64;
        match self {
            Self::Uniform => r,
            Self::Cosine => (std::f64::consts::FRAC_PI_2 * (1.0 - r)).cos(),
        }
    }
}

/// Cumulative unmasked counts `|J_0| = 0 ≤ |J_1| ≤ ... ≤ |J_N| = D`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmaskSchedule {
    pub kind: ScheduleKind,
    pub seq_len: usize,
    pub steps: usize,
    pub cumulative: Vec<usize>,
}

/// Rounds half away from zero and clamps into `[lo, hi]`.
fn round_clamped(x: f64, lo: usize, hi: usize) -> usize {
    let r = x.round();
    if r <= lo as f64 {
        lo
    } else if r >= hi as f64 {
        hi
    } else {
        r as usize
    }
}

pub fn unmask_counts(kind: ScheduleKind, seq_len: usize, steps: usize) -> Result<UnmaskSchedule> {
    if steps == 0 || steps > seq_len {
        return Err(Error::Argument(format!(
            "need 1 <= steps <= sequence length, got steps = {steps}, length = {seq_len}"
        )));
    }
    let d = seq_len as f64;
    let mut cumulative = Vec::with_capacity(steps + 1);
    cumulative.push(0);
    for n in 1..steps {
        let prev = *cumulative.last().unwrap();
        cumulative.push(round_clamped(d * kind.fraction(n as f64, steps), prev, seq_len));
    }
    cumulative.push(seq_len);
    Ok(UnmaskSchedule { kind, seq_len, steps, cumulative })
}

impl UnmaskSchedule {
    /// Round sizes `|I_n|` for `n = 1..=N`.
    pub fn sizes(&self) -> Vec<usize> {
        self.cumulative.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// `|J_{n-1/2}|` for `n = 1..=N`, each clamped into `[|J_{n-1}|, |J_n|]`.
    pub fn half_step_counts(&self) -> Vec<usize> {
        let d = self.seq_len as f64;
        (1..=self.steps)
            .map(|n| {
                let lo = self.cumulative[n - 1];
                let hi = self.cumulative[n];
                round_clamped(d * self.kind.fraction(n as f64 - 0.5, self.steps), lo, hi)
            })
            .collect()
    }
}

/// Free-function form of [`UnmaskSchedule::half_step_counts`].
pub fn half_step_counts(schedule: &UnmaskSchedule) -> Vec<usize> {
    schedule.half_step_counts()
}

/// Gumbel temperature `α (1 - n/N)` at step `n`; exactly zero at `n = N`,
/// also for `α = ∞`.
pub fn gumbel_temp(alpha: f64, n: usize, steps: usize) -> f64 {
    assert!(n >= 1 && n <= steps, "step {n} outside 1..={steps}");
    if n == steps {
        return 0.0;
    }
    alpha * (1.0 - n as f64 / steps as f64)
}

/// How many leading entries the hybrid merge takes from the exploration
/// ordering: `round((1 - n/N) |I_n|)`.
pub fn hybrid_m(n: usize, steps: usize, round_size: usize) -> usize {
    assert!(n >= 1 && n <= steps, "step {n} outside 1..={steps}");
    round_clamped((1.0 - n as f64 / steps as f64) * round_size as f64, 0, round_size)
}

/// One row of a schedule dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleRow {
    pub n: usize,
    pub unmasked: usize,
    pub round_size: usize,
    pub half_step: usize,
    pub temperature: f64,
}

pub fn schedule_rows(schedule: &UnmaskSchedule, alpha: f64) -> Vec<ScheduleRow> {
    let sizes = schedule.sizes();
    let halves = schedule.half_step_counts();
    (1..=schedule.steps)
        .map(|n| ScheduleRow {
            n,
            unmasked: schedule.cumulative[n],
            round_size: sizes[n - 1],
            half_step: halves[n - 1],
            temperature: gumbel_temp(alpha, n, schedule.steps),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_example() {
        let s = unmask_counts(ScheduleKind::Uniform, 10, 5).unwrap();
        assert_eq!(s.cumulative, vec![0, 2, 4, 6, 8, 10]);
        assert_eq!(s.sizes(), vec![2; 5]);
    }

    #[test]
    fn cosine_endpoints() {
        for d in [1, 7, 32, 256] {
            for steps in [1, 2, 5, d] {
                if steps > d {
                    continue;
                }
                let s = unmask_counts(ScheduleKind::Cosine, d, steps).unwrap();
                assert_eq!(s.cumulative[0], 0);
                assert_eq!(*s.cumulative.last().unwrap(), d);
            }
        }
        let s = unmask_counts(ScheduleKind::Cosine, 16, 4).unwrap();
        // 16 cos(3π/8) = 6.12, 16 cos(π/4) = 11.31, 16 cos(π/8) = 14.78
        assert_eq!(s.cumulative, vec![0, 6, 11, 15, 16]);
    }

    #[test]
    fn rejects_too_many_steps() {
        assert!(unmask_counts(ScheduleKind::Uniform, 3, 4).is_err());
        assert!(unmask_counts(ScheduleKind::Uniform, 3, 0).is_err());
    }

    #[test]
    fn temperature_examples() {
        assert_eq!(gumbel_temp(6.0, 4, 8), 3.0);
        assert_eq!(gumbel_temp(6.0, 8, 8), 0.0);
        assert_eq!(gumbel_temp(12.0, 2, 8), 9.0);
        assert_eq!(gumbel_temp(f64::INFINITY, 8, 8), 0.0);
    }

    #[test]
    fn half_steps() {
        let s = unmask_counts(ScheduleKind::Uniform, 10, 5).unwrap();
        assert_eq!(s.half_step_counts(), vec![1, 3, 5, 7, 9]);

        // 3 positions over 3 steps: every half step rounds up onto |J_n|.
        let s = unmask_counts(ScheduleKind::Uniform, 3, 3).unwrap();
        assert_eq!(s.half_step_counts(), vec![1, 2, 3]);

        // A degenerate round: both halves empty.
        let s = UnmaskSchedule {
            kind: ScheduleKind::Uniform,
            seq_len: 4,
            steps: 3,
            cumulative: vec![0, 2, 2, 4],
        };
        let h = s.half_step_counts();
        assert_eq!(h, vec![1, 2, 3]);

        let s = UnmaskSchedule {
            kind: ScheduleKind::Uniform,
            seq_len: 10,
            steps: 2,
            cumulative: vec![0, 4, 10],
        };
        // round(2.5) = 3 and round(7.5) = 8 already lie inside their brackets
        assert_eq!(s.half_step_counts(), vec![3, 8]);
        let s = UnmaskSchedule { cumulative: vec![0, 9, 10], ..s };
        // round(7.5) = 8 is raised to |J_1| = 9
        assert_eq!(s.half_step_counts(), vec![3, 9]);
    }

    #[test]
    fn hybrid_m_examples() {
        assert_eq!(hybrid_m(1, 4, 4), 3);
        assert_eq!(hybrid_m(4, 4, 7), 0);
        assert_eq!(hybrid_m(1, 1000, 5), 5);
    }

    proptest! {
        #[test]
        fn schedules_are_monotone(d in 1usize..300, frac in 0.0f64..1.0, cosine in any::<bool>()) {
            let steps = 1 + ((d - 1) as f64 * frac) as usize;
            let kind = if cosine { ScheduleKind::Cosine } else { ScheduleKind::Uniform };
            let s = unmask_counts(kind, d, steps).unwrap();
            prop_assert_eq!(s.cumulative[0], 0);
            prop_assert_eq!(s.cumulative[steps], d);
            prop_assert!(s.cumulative.windows(2).all(|w| w[0] <= w[1]));
            let halves = s.half_step_counts();
            for n in 1..=steps {
                prop_assert!(s.cumulative[n - 1] <= halves[n - 1] && halves[n - 1] <= s.cumulative[n]);
            }
        }

        #[test]
        fn temperature_is_affine(alpha in 0.1f64..20.0, steps in 2usize..50) {
            let ts: Vec<f64> = (1..=steps).map(|n| gumbel_temp(alpha, n, steps)).collect();
            let step = alpha / steps as f64;
            for w in ts.windows(2) {
                prop_assert!((w[0] - w[1] - step).abs() < 1e-9);
            }
            prop_assert_eq!(ts[steps - 1], 0.0);
        }
    }
}
