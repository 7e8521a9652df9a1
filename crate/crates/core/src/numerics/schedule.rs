use serde::{Deserialize, Serialize};

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn noam_lr(step: u64, warmup: u64, d_model: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Exponential temperature decay for Gumbel-Softmax, re-evaluated every `every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSchedule {
    pub initial: f64,
    pub min: f64,
    pub rate: f64,
    pub every: u64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        Self {
            initial: 1.0,
            min: 0.1,
            rate: 1e-5,
            every: 1000,
        }
    }
}

impl TauSchedule {
    pub fn at(&self, step: u64) -> f64 {
        let every = self.every.max(1);
        let t = (step / every * every) as f64;
        (self.initial * (-self.rate * t).exp()).max(self.min)
    }
}

/// `τ = max(τ_min, τ₀·exp(−r·t))` with the default schedule.
pub fn anneal_tau(step: u64) -> f64 {
    TauSchedule::default().at(step)
}
