use std::f64::consts::PI;

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at step `total`.
/// Steps past `total` stay at `lr_min`.
pub fn cosine_lr(step: u64, total: u64, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || step >= total {
        return lr_min;
    }
    let progress = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos())
}
