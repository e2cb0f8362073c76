use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TensorError;

/// Floor applied by decaying schedules.
pub const DEFAULT_MIN_LR: f64 = 1e-10;

/// Learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        base_lr: f64,
    },
    /// `base_lr·(1 − t/total_steps)`, floored at `min_lr`.
    Linear {
        base_lr: f64,
        min_lr: f64,
        total_steps: u64,
    },
    /// Multiplies by `decrease_factor` every time `patience` consecutive
    /// validations fail to improve on the best score so far.
    Plateau {
        base_lr: f64,
        min_lr: f64,
        decrease_factor: f64,
        patience: usize,
    },
    /// Triangular cyclic schedule with half-period `step_size`.
    Cyclic {
        min_lr: f64,
        max_lr: f64,
        step_size: u64,
    },
}

/// Schedule family, as named in configuration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    Linear,
    Plateau,
    Cyclic,
}

impl FromStr for ScheduleKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "plateau" => Ok(Self::Plateau),
            "cyclic" => Ok(Self::Cyclic),
            other => Err(TensorError::Invalid {
                op: "schedule",
                msg: format!("unknown schedule kind `{other}` (expected constant, linear, plateau or cyclic)"),
            }),
        }
    }
}

impl LrSchedule {
    pub fn kind(&self) -> ScheduleKind {
        match self {
            Self::Constant { .. } => ScheduleKind::Constant,
            Self::Linear { .. } => ScheduleKind::Linear,
            Self::Plateau { .. } => ScheduleKind::Plateau,
            Self::Cyclic { .. } => ScheduleKind::Cyclic,
        }
    }

    pub fn min_lr(&self) -> f64 {
        match *self {
            Self::Constant { base_lr } => base_lr,
            Self::Linear { min_lr, .. } | Self::Plateau { min_lr, .. } | Self::Cyclic { min_lr, .. } => min_lr,
        }
    }

    pub fn max_lr(&self) -> f64 {
        match *self {
            Self::Constant { base_lr } | Self::Linear { base_lr, .. } | Self::Plateau { base_lr, .. } => base_lr,
            Self::Cyclic { max_lr, .. } => max_lr,
        }
    }

    /// Number of decay events a plateau schedule has taken given the
    /// validation history (higher scores are better).
    pub fn plateau_decays(history: &[f64], patience: usize) -> u32 {
        let mut best = f64::NEG_INFINITY;
        let mut stale = 0;
        let mut k = 0;
        for &s in history {
            if s > best {
                best = s;
                stale = 0;
            } else {
                stale += 1;
                if stale == patience {
                    k += 1;
                    stale = 0;
                }
            }
        }
        k
    }

    /// Learning rate at optimizer step `step` given the validation scores
    /// observed so far.
    pub fn lr_at(&self, step: u64, validation_history: &[f64]) -> f64 {
        match *self {
            Self::Constant { base_lr } => base_lr,
            Self::Linear {
                base_lr,
                min_lr,
                total_steps,
            } => {
                let frac = if total_steps == 0 {
                    1.0
                } else {
                    (step as f64 / total_steps as f64).min(1.0)
                };
                (base_lr * (1.0 - frac)).max(min_lr)
            }
            Self::Plateau {
                base_lr,
                min_lr,
                decrease_factor,
                patience,
            } => {
                let k = Self::plateau_decays(validation_history, patience.max(1));
                (base_lr * decrease_factor.powi(k as i32)).max(min_lr)
            }
            Self::Cyclic {
                min_lr,
                max_lr,
                step_size,
            } => {
                let s = step_size.max(1) as f64;
                let t = step as f64;
                let cycle = (1.0 + t / (2.0 * s)).floor();
                let x = (t / s - 2.0 * cycle + 1.0).abs();
                let w = (1.0 - x).max(0.0);
                // Written as a convex combination so the vertices are exact.
                (min_lr * (1.0 - w) + max_lr * w).clamp(min_lr, max_lr)
            }
        }
    }
}
