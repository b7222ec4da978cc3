//! Linear warmup followed by cosine annealing.

use crate::math;

/// Number of warmup steps: `round(warmup_fraction · total)`.
pub fn warmup_steps(total_steps: u64, warmup_fraction: f64) -> u64 {
    math::round(warmup_fraction * total_steps as f64) as u64
}

/// Learning rate at `step` of `total_steps`: a linear ramp from 0 to `peak`
/// over the warmup steps, then `peak · ½(1 + cos(π·(step − W)/(total − W)))`.
pub fn lr_at(step: u64, total_steps: u64, peak: f64, warmup_fraction: f64) -> f64 {
    let w = warmup_steps(total_steps, warmup_fraction);
    if step < w {
        return peak * step as f64 / w as f64;
    }
    let span = total_steps.saturating_sub(w).max(1) as f64;
    let progress = (step - w) as f64 / span;
    peak * 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress))
}
