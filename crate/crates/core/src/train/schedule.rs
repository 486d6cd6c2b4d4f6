use std::f64::consts::PI;

use super::config::Schedule;

/// Learning rate at `step`: linear ramp `0 → peak` over `warmup` steps, then
/// cosine decay `peak → 0` by `total` (or constant `peak`).
pub fn lr_schedule(step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    lr_at(Schedule::Cosine, step, warmup, total, peak)
}

pub fn lr_at(schedule: Schedule, step: usize, warmup: usize, total: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    match schedule {
        Schedule::Constant => peak,
        Schedule::Cosine => {
            if total <= warmup {
                return peak;
            }
            let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
            0.5 * peak * (1.0 + (PI * progress).cos())
        }
    }
}
