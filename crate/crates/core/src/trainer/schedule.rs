/// Linear warm-up followed by step decay at epoch milestones.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_iters: usize,
    /// Epochs at which the rate is multiplied by `decay`.
    pub milestones: Vec<usize>,
    pub decay: f64,
    pub iters_per_epoch: usize,
}

/// Learning rate for a 0-based iteration. The ramp starts at 0 on
/// iteration 0 and reaches `base_lr` at `warmup_iters`.
pub fn lr_at(iteration: usize, s: &LrSchedule) -> f64 {
    if iteration < s.warmup_iters {
        return s.base_lr * iteration as f64 / s.warmup_iters as f64;
    }
    let passed = s
        .milestones
        .iter()
        .filter(|&&m| iteration >= m * s.iters_per_epoch)
        .count();
    s.base_lr * s.decay.powi(passed as i32)
}
