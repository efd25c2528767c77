use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-cycle learning-rate schedule: linear warm-up from
/// `max_lr / warmup_div` to `max_lr`, then cosine decay to
/// `max_lr / final_div` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub warmup_div: f64,
    pub final_div: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            max_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 1000,
            warmup_div: 25.0,
            final_div: 1e4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0) {
            return Err(Error::InvalidArgument(format!("max_lr {} must be positive", self.max_lr)));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::InvalidArgument(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based, `0..=total_steps`).
pub fn one_cycle_lr(step: u64, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    let start = cfg.max_lr / cfg.warmup_div;
    let floor = cfg.max_lr / cfg.final_div;
    // Interpolations are written as a(1-t) + b t so both endpoints are exact.
    if step <= cfg.warmup_steps {
        let t = if cfg.warmup_steps == 0 {
            1.0
        } else {
            step as f64 / cfg.warmup_steps as f64
        };
        Ok(start * (1.0 - t) + cfg.max_lr * t)
    } else {
        let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
        let c = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress));
        Ok(floor * (1.0 - c) + cfg.max_lr * c)
    }
}
