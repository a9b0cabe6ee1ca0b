//! Linear warmup followed by cosine decay.

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub final_lr: f64,
}

impl LrSchedule {
    /// Base 5e-5 decaying to 5e-7.
    pub fn new(warmup_steps: u64, total_steps: u64) -> Self {
        Self {
            base_lr: 5e-5,
            warmup_steps,
            total_steps,
            final_lr: 5e-7,
        }
    }
}

/// Learning rate at `step`; steps past `total_steps` return `final_lr`.
pub fn lr_at(step: u64, s: &LrSchedule) -> f64 {
    if step >= s.total_steps {
        return s.final_lr;
    }
    if step < s.warmup_steps {
        return s.base_lr * step as f64 / s.warmup_steps as f64;
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    let progress = (step - s.warmup_steps) as f64 / span;
    s.final_lr + 0.5 * (s.base_lr - s.final_lr) * (1.0 + math::cos(core::f64::consts::PI * progress))
}
