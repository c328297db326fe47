use std::f64::consts::PI;

use super::config::TrainConfig;

/// Linear warmup from 0 to `peak_lr` over `warmup_epochs`, then cosine decay
/// towards 0 over the remaining epochs.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let total = cfg.epochs * steps_per_epoch;
    let warmup = (cfg.warmup_epochs * steps_per_epoch).min(total);
    if step < warmup {
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return cfg.peak_lr;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    cfg.peak_lr * 0.5 * (1.0 + (PI * progress).cos())
}
