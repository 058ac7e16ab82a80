use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Linear warmup followed by cosine annealing, counted in epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { base_lr: 2e-3, warmup_epochs: 5, total_epochs: 300, min_lr: 1e-6 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.total_epochs >= 1, Config, "total_epochs must be at least 1");
        ensure!(
            self.warmup_epochs < self.total_epochs,
            Config,
            "warmup_epochs ({}) must be below total_epochs ({})",
            self.warmup_epochs,
            self.total_epochs
        );
        ensure!(
            self.min_lr >= 0.0 && self.min_lr <= self.base_lr,
            Config,
            "need 0 ≤ min_lr ({}) ≤ base_lr ({})",
            self.min_lr,
            self.base_lr
        );
        Ok(())
    }
}

/// Learning rate for the 0-based optimizer `step`.
///
/// Warmup ramps `base/W, 2·base/W, …` and reaches `base_lr` on the last
/// warmup step. The cosine then runs from `base_lr` there down to `min_lr`
/// on the final step `T − 1`, and stays at `min_lr` afterwards.
pub fn lr_at(step: usize, cfg: &ScheduleConfig, steps_per_epoch: usize) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let total = cfg.total_epochs * steps_per_epoch;
    if step < warmup {
        return cfg.base_lr * (step + 1) as f64 / warmup as f64;
    }
    let start = warmup.saturating_sub(1);
    let last = total.saturating_sub(1);
    if step >= last || last == start {
        return if last == start && step == start { cfg.base_lr } else { cfg.min_lr };
    }
    let t = (step - start) as f64 / (last - start) as f64;
    cfg.min_lr + (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
