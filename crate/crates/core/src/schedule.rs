//! Step-size and smoothing-radius sequences.
//!
//! A [`Schedule`] is either a power law `base / (t + 1)^exponent` or a
//! constant. The round index starts at zero, so `eval(0) == base` for every
//! schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("{role} schedule base must be positive and finite, got {base}")]
    NonPositiveBase { role: &'static str, base: f64 },
    #[error("{role} schedule exponent {exponent} is outside {allowed}")]
    OutOfRangeExponent {
        role: &'static str,
        exponent: f64,
        allowed: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    PowerLaw,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base: f64,
    #[serde(default)]
    pub exponent: f64,
}

impl Schedule {
    pub fn power_law(base: f64, exponent: f64) -> Self {
        Schedule {
            kind: ScheduleKind::PowerLaw,
            base,
            exponent,
        }
    }

    pub fn constant(base: f64) -> Self {
        Schedule {
            kind: ScheduleKind::Constant,
            base,
            exponent: 0.0,
        }
    }

    /// Value of the sequence at round `t`.
    pub fn eval(&self, t: u64) -> f64 {
        match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::PowerLaw => {
                if t == 0 || self.exponent == 0.0 {
                    self.base
                } else {
                    self.base / ((t + 1) as f64).powf(self.exponent)
                }
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        self.kind == ScheduleKind::Constant
    }

    fn check_base(&self, role: &'static str) -> Result<(), ScheduleError> {
        if self.base.is_finite() && self.base > 0.0 {
            Ok(())
        } else {
            Err(ScheduleError::NonPositiveBase {
                role,
                base: self.base,
            })
        }
    }
}

/// A step/smoothing pair that passed validation.
///
/// `theorem_applies` is false whenever either side is constant; such runs are
/// the fixed-parameter baseline and carry no convergence guarantee.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePair {
    pub step: Schedule,
    pub smoothing: Schedule,
    pub theorem_applies: bool,
}

impl SchedulePair {
    pub fn eta(&self, t: u64) -> f64 {
        self.step.eval(t)
    }

    pub fn u(&self, t: u64) -> f64 {
        self.smoothing.eval(t)
    }

    /// `sum_{k=t-B}^{t-1} eta(k)^2`, zero while `t < B`.
    pub fn delayed_step_energy(&self, t: u64, bound: u64) -> f64 {
        if bound == 0 || t < bound {
            return 0.0;
        }
        (t - bound..t).map(|k| self.eta(k).powi(2)).sum()
    }

    /// Growth regime of the weighted gradient sum for this pair, if both
    /// sides are power laws.
    pub fn rate_regime(&self) -> Option<RateRegime> {
        if self.theorem_applies {
            predicted_rate_regime(self.step.exponent, self.smoothing.exponent).ok()
        } else {
            None
        }
    }
}

pub fn validate_schedule_pair(
    step: Schedule,
    smoothing: Schedule,
) -> Result<SchedulePair, ScheduleError> {
    step.check_base("step")?;
    smoothing.check_base("smoothing")?;
    if step.kind == ScheduleKind::PowerLaw && !(step.exponent > 0.0 && step.exponent < 1.0) {
        return Err(ScheduleError::OutOfRangeExponent {
            role: "step",
            exponent: step.exponent,
            allowed: "(0, 1)",
        });
    }
    if smoothing.kind == ScheduleKind::PowerLaw
        && !(smoothing.exponent > 0.0 && smoothing.exponent.is_finite())
    {
        return Err(ScheduleError::OutOfRangeExponent {
            role: "smoothing",
            exponent: smoothing.exponent,
            allowed: "(0, inf)",
        });
    }
    Ok(SchedulePair {
        step,
        smoothing,
        theorem_applies: !step.is_constant() && !smoothing.is_constant(),
    })
}

/// Growth of `S(T) = sum_t eta(t) |grad f(x(t))|^2` implied by the bound
/// terms of the convergence proof, one variant per case of the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateRegime {
    /// `0 < alpha < 1/2`, `alpha + 2 beta < 1`: `T^(1-2a) + T^(1-a-2b)`.
    MixedPower,
    /// `0 < alpha < 1/2`, `alpha + 2 beta >= 1`: `T^(1-2a)`.
    StepPower,
    /// `1/2 <= alpha < 1`, `alpha + 2 beta < 1`: `T^(1-a-2b)`.
    SmoothingPower,
    /// `alpha = 1/2`, `beta >= 1/4`: `log T`.
    LogT,
    /// `1/2 < alpha < 1`, `alpha + 2 beta = 1`: `log T`.
    LogTBalanced,
    /// `1/2 < alpha < 1`, `alpha + 2 beta > 1`: bounded.
    Constant,
}

/// Shape of a growth law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Growth {
    Power(f64),
    Log,
    Bounded,
}

impl Growth {
    /// Log-log slope the law tends to; logarithmic and bounded growth both
    /// count as exponent zero.
    pub fn exponent(&self) -> f64 {
        match self {
            Growth::Power(e) => *e,
            Growth::Log | Growth::Bounded => 0.0,
        }
    }
}

impl RateRegime {
    pub fn growth(&self, alpha: f64, beta: f64) -> Growth {
        match self {
            RateRegime::MixedPower => Growth::Power((1.0 - 2.0 * alpha).max(1.0 - alpha - 2.0 * beta)),
            RateRegime::StepPower => Growth::Power(1.0 - 2.0 * alpha),
            RateRegime::SmoothingPower => Growth::Power(1.0 - alpha - 2.0 * beta),
            RateRegime::LogT | RateRegime::LogTBalanced => Growth::Log,
            RateRegime::Constant => Growth::Bounded,
        }
    }

    pub const ALL: [RateRegime; 6] = [
        RateRegime::MixedPower,
        RateRegime::StepPower,
        RateRegime::SmoothingPower,
        RateRegime::LogT,
        RateRegime::LogTBalanced,
        RateRegime::Constant,
    ];
}

const REGIME_EPS: f64 = 1e-12;

pub fn predicted_rate_regime(alpha: f64, beta: f64) -> Result<RateRegime, ScheduleError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ScheduleError::OutOfRangeExponent {
            role: "step",
            exponent: alpha,
            allowed: "(0, 1)",
        });
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(ScheduleError::OutOfRangeExponent {
            role: "smoothing",
            exponent: beta,
            allowed: "(0, inf)",
        });
    }
    let balance = alpha + 2.0 * beta - 1.0;
    let half = alpha - 0.5;
    let regime = if half < -REGIME_EPS {
        if balance < -REGIME_EPS {
            RateRegime::MixedPower
        } else {
            RateRegime::StepPower
        }
    } else if balance < -REGIME_EPS {
        RateRegime::SmoothingPower
    } else if half.abs() <= REGIME_EPS {
        RateRegime::LogT
    } else if balance.abs() <= REGIME_EPS {
        RateRegime::LogTBalanced
    } else {
        RateRegime::Constant
    };
    Ok(regime)
}
