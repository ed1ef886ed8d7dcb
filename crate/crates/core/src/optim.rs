//! Adam with bias correction and an exponential learning-rate schedule.

use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moment accumulators.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    cfg: AdamParams,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamParams) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            cfg,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let t = self.t as f64;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
    }
}

/// Geometric interpolation from `lr_start` at step 0 to `lr_end` at
/// `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(lr_start: f64, lr_end: f64, total_steps: usize) -> Result<Self> {
        if lr_start <= 0.0 || lr_end <= 0.0 {
            return Err(Error::InvalidInput("learning rates must be positive".into()));
        }
        if total_steps == 0 {
            return Err(Error::InvalidInput("schedule needs at least one step".into()));
        }
        Ok(LrSchedule {
            lr_start,
            lr_end,
            total_steps,
        })
    }

    /// `lr_start * (lr_end / lr_start)^(step / total_steps)`.
    pub fn at(&self, step: usize) -> f64 {
        let frac = step as f64 / self.total_steps as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(frac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_params_and_increments_step() {
        let mut st = AdamState::new(3, AdamParams::default());
        let mut p = vec![1.0, -2.0, 0.5];
        st.step(&mut p, &[0.0, 0.0, 0.0], 0.1);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut st = AdamState::new(2, AdamParams::default());
        let mut p = vec![0.0, 0.0];
        let lr = 0.01;
        st.step(&mut p, &[3.0, -0.2], lr);
        assert_relative_eq!(p[0], -lr, epsilon = 1e-6);
        assert_relative_eq!(p[1], lr, epsilon = 1e-6);
    }

    #[test]
    fn constant_gradient_converges_to_lr_sized_steps() {
        // In the long-run constant-gradient limit the step approaches
        // -lr * sign(g) regardless of the gradient scale.
        for &g in &[1e-3, 1.0, 1e3] {
            let mut st = AdamState::new(1, AdamParams::default());
            let mut p = vec![0.0];
            let lr = 0.05;
            let mut prev = 0.0;
            let mut step = 0.0;
            for _ in 0..10_000 {
                st.step(&mut p, &[g], lr);
                step = prev - p[0];
                prev = p[0];
            }
            assert_relative_eq!(step, lr, max_relative = 1e-3);
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = LrSchedule::new(1e-2, 1e-4, 100).unwrap();
        assert_relative_eq!(s.at(0), 1e-2);
        assert_relative_eq!(s.at(100), 1e-4, max_relative = 1e-12);
        // Midpoint is the geometric mean.
        assert_relative_eq!(s.at(50), 1e-3, max_relative = 1e-12);
    }

    #[test]
    fn schedule_is_monotone_decreasing() {
        let s = LrSchedule::new(1e-5, 1e-7, 240).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=240 {
            let lr = s.at(step);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(LrSchedule::new(0.0, 1e-4, 10).is_err());
        assert!(LrSchedule::new(1e-2, 1e-4, 0).is_err());
    }
}
