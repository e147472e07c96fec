use std::f64::consts::PI;

use super::TrainConfig;

/// Number of warmup steps for a run of `total_steps`.
pub fn warmup_steps(total_steps: usize, config: &TrainConfig) -> usize {
    (config.warmup_ratio * total_steps as f64).round() as usize
}

/// Learning rate at `step` of `total_steps`: linear warmup from 0, then a
/// half-cosine decay reaching 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let lr = config.learning_rate;
    let step = step.min(total_steps);
    let warm = warmup_steps(total_steps, config);
    if step < warm {
        return lr * step as f64 / warm as f64;
    }
    let span = total_steps - warm;
    if span == 0 {
        return lr;
    }
    let progress = (step - warm) as f64 / span as f64;
    lr * 0.5 * (1.0 + (PI * progress).cos())
}
