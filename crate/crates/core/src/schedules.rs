//! Round-indexed sample-size sequences, step-size sequences and the
//! permissible delay function.
//!
//! Round indices are zero-based. A `Linear` schedule evaluates at
//! `round + 1`, so `linear:10,1,0` yields 10, 20, 30, ... and the first
//! round is never empty.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid sample schedule: {0}")]
    InvalidSample(String),
    #[error("invalid step schedule: {0}")]
    InvalidStep(String),
    #[error("cannot parse schedule `{input}`: {reason}")]
    Parse { input: String, reason: String },
}

/// Number of SGD steps scheduled for each communication round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SampleSchedule {
    /// `a * (round + 1)^p + b`
    Linear { a: f64, p: f64, b: u64 },
    Constant { s: u64 },
    /// `scale * (round + 1) / ln(round + 2)`
    ThetaLog { scale: f64 },
}

/// Rounds half-up, clamped to at least one step.
fn round_count(x: f64) -> u64 {
    let r = (x + 0.5).floor();
    if r < 1.0 {
        1
    } else {
        r as u64
    }
}

impl SampleSchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        match *self {
            SampleSchedule::Linear { a, p, b } => {
                if !a.is_finite() || !p.is_finite() || a < 0.0 || p < 0.0 {
                    return Err(ScheduleError::InvalidSample(format!(
                        "linear coefficients must be finite and non-negative (a={a}, p={p})"
                    )));
                }
                if a == 0.0 && b == 0 {
                    return Err(ScheduleError::InvalidSample(
                        "linear schedule with a=0 and b=0 produces empty rounds".into(),
                    ));
                }
                Ok(())
            }
            SampleSchedule::Constant { s } => {
                if s == 0 {
                    return Err(ScheduleError::InvalidSample(
                        "constant sample size must be positive".into(),
                    ));
                }
                Ok(())
            }
            SampleSchedule::ThetaLog { scale } => {
                if !scale.is_finite() || scale <= 0.0 {
                    return Err(ScheduleError::InvalidSample(format!(
                        "thetalog scale must be positive (got {scale})"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Steps scheduled for zero-based `round`.
    pub fn sample_size(&self, round: u64) -> Result<u64, ScheduleError> {
        self.validate()?;
        Ok(self.size_unchecked(round))
    }

    fn size_unchecked(&self, round: u64) -> u64 {
        let x = (round + 1) as f64;
        match *self {
            SampleSchedule::Linear { a, p, b } => round_count(a * x.powf(p) + b as f64),
            SampleSchedule::Constant { s } => s,
            SampleSchedule::ThetaLog { scale } => round_count(scale * x / (x + 1.0).ln()),
        }
    }

    /// Smallest `T` with `sum_{j<T} s_j >= k`.
    pub fn required_rounds(&self, k: u64) -> Result<u64, ScheduleError> {
        self.validate()?;
        if let SampleSchedule::Constant { s } = *self {
            return Ok(k.div_ceil(s));
        }
        let mut total = 0u64;
        let mut rounds = 0u64;
        while total < k {
            total = total.saturating_add(self.size_unchecked(rounds));
            rounds += 1;
        }
        Ok(rounds)
    }

    /// Prefix sum `sum_{l<round} s_l`: the cumulative iteration count at
    /// which `round` starts.
    pub fn round_start_iteration(&self, round: u64) -> Result<u64, ScheduleError> {
        self.validate()?;
        if let SampleSchedule::Constant { s } = *self {
            return Ok(s.saturating_mul(round));
        }
        Ok((0..round).fold(0u64, |acc, r| acc.saturating_add(self.size_unchecked(r))))
    }

    /// Sizes of the first `rounds` rounds.
    pub fn sizes(&self, rounds: u64) -> Result<Vec<u64>, ScheduleError> {
        self.validate()?;
        Ok((0..rounds).map(|r| self.size_unchecked(r)).collect())
    }
}

impl fmt::Display for SampleSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleSchedule::Linear { a, p, b } => write!(f, "linear:{a},{p},{b}"),
            SampleSchedule::Constant { s } => write!(f, "const:{s}"),
            SampleSchedule::ThetaLog { scale } => write!(f, "thetalog:{scale}"),
        }
    }
}

impl FromStr for SampleSchedule {
    type Err = ScheduleError;

    /// Grammar: `linear:a,p,b` | `const:s` | `thetalog:scale`.
    fn from_str(input: &str) -> Result<Self, Self::Err> {
        let perr = |reason: &str| ScheduleError::Parse {
            input: input.to_string(),
            reason: reason.to_string(),
        };
        let (kind, args) = input
            .trim()
            .split_once(':')
            .ok_or_else(|| perr("expected `kind:args`"))?;
        let parts: Vec<&str> = args.split(',').map(str::trim).collect();
        let sched = match kind.to_ascii_lowercase().as_str() {
            "linear" => {
                if parts.len() != 3 {
                    return Err(perr("linear takes three values a,p,b"));
                }
                let a = parts[0].parse().map_err(|_| perr("bad `a`"))?;
                let p = parts[1].parse().map_err(|_| perr("bad `p`"))?;
                let b = parts[2].parse().map_err(|_| perr("`b` must be a non-negative integer"))?;
                SampleSchedule::Linear { a, p, b }
            }
            "const" | "constant" => {
                if parts.len() != 1 {
                    return Err(perr("const takes one value"));
                }
                let s = parts[0].parse().map_err(|_| perr("`s` must be a positive integer"))?;
                SampleSchedule::Constant { s }
            }
            "thetalog" => {
                if parts.len() != 1 {
                    return Err(perr("thetalog takes one value"));
                }
                let scale = parts[0].parse().map_err(|_| perr("bad `scale`"))?;
                SampleSchedule::ThetaLog { scale }
            }
            _ => return Err(perr("unknown kind (expected linear, const or thetalog)")),
        };
        sched.validate()?;
        Ok(sched)
    }
}

/// Step-size sequences, indexed by cumulative iteration count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    /// `eta0 / (1 + beta * sqrt(t))`
    Diminishing { eta0: f64, beta: f64 },
    /// Gradient step of the threshold baseline: `eta0 / (epsilon * t + 1)`.
    BaselineAlpha { eta0: f64, epsilon: f64 },
    /// Consensus step of the threshold baseline:
    /// `2.252 * eta0 / (epsilon * t + 1)^(1/10)`.
    BaselineBeta { eta0: f64, epsilon: f64 },
}

pub const DEFAULT_ETA0: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 0.01;
pub const BASELINE_EPSILON: f64 = 1e-5;
const BASELINE_BETA_GAIN: f64 = 2.252;

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Diminishing {
            eta0: DEFAULT_ETA0,
            beta: DEFAULT_BETA,
        }
    }
}

impl StepSchedule {
    pub fn baseline_alpha(eta0: f64) -> Self {
        StepSchedule::BaselineAlpha {
            eta0,
            epsilon: BASELINE_EPSILON,
        }
    }

    pub fn baseline_beta(eta0: f64) -> Self {
        StepSchedule::BaselineBeta {
            eta0,
            epsilon: BASELINE_EPSILON,
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let (eta0, second, name) = match *self {
            StepSchedule::Diminishing { eta0, beta } => (eta0, beta, "beta"),
            StepSchedule::BaselineAlpha { eta0, epsilon }
            | StepSchedule::BaselineBeta { eta0, epsilon } => (eta0, epsilon, "epsilon"),
        };
        if !eta0.is_finite() || eta0 <= 0.0 {
            return Err(ScheduleError::InvalidStep(format!(
                "eta0 must be positive (got {eta0})"
            )));
        }
        if !second.is_finite() || second < 0.0 {
            return Err(ScheduleError::InvalidStep(format!(
                "{name} must be finite and non-negative (got {second})"
            )));
        }
        Ok(())
    }

    pub fn step_size(&self, t: u64) -> f64 {
        let t = t as f64;
        match *self {
            StepSchedule::Diminishing { eta0, beta } => eta0 / (1.0 + beta * t.sqrt()),
            StepSchedule::BaselineAlpha { eta0, epsilon } => eta0 / (epsilon * t + 1.0),
            StepSchedule::BaselineBeta { eta0, epsilon } => {
                BASELINE_BETA_GAIN * eta0 / (epsilon * t + 1.0).powf(0.1)
            }
        }
    }
}

/// Smallest argument evaluated exactly; below it `tau` returns `tau(3)`.
pub const TAU_GUARD: u64 = 3;

/// Permissible staleness `sqrt(t / ln t)` at iteration `t`.
pub fn tau(t: u64) -> f64 {
    let t = t.max(TAU_GUARD) as f64;
    (t / t.ln()).sqrt()
}
