//! Reference Adam with bias correction and an optional linear learning-rate decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// `η_t = η₀ (1 − t/T)`, floored at zero.
    LinearDecay {
        total_steps: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub base_lr: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    /// The 2-D toy setting: `(0.9, 0.999)`, `η₀ = 0.25`, linear decay over 45 steps.
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            base_lr: 0.25,
            schedule: LrSchedule::LinearDecay { total_steps: 45 },
        }
    }
}

impl AdamConfig {
    pub fn constant(base_lr: f64) -> Self {
        Self {
            base_lr,
            schedule: LrSchedule::Constant,
            ..Self::default()
        }
    }

    /// Learning rate used by the update at 0-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.base_lr,
            LrSchedule::LinearDecay { total_steps } if total_steps > 0 => {
                self.base_lr * (1.0 - t as f64 / total_steps as f64).max(0.0)
            }
            LrSchedule::LinearDecay { .. } => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: usize,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(config: AdamConfig, dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step_count: 0,
            config,
        }
    }

    /// One update in place; returns the applied displacement `θ_new − θ_old`.
    pub fn step(&mut self, theta: &mut [f64], gradient: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.m.len(), "theta length");
        assert_eq!(gradient.len(), self.m.len(), "gradient length");
        let c = self.config;
        let t = self.step_count;
        let lr = c.lr_at(t);
        let bias1 = 1.0 - c.beta1.powi(t as i32 + 1);
        let bias2 = 1.0 - c.beta2.powi(t as i32 + 1);
        let mut delta = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let g = gradient[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bias1;
            let v_hat = self.v[i] / bias2;
            let d = -lr * m_hat / (v_hat.sqrt() + c.epsilon);
            theta[i] += d;
            delta.push(d);
        }
        self.step_count += 1;
        delta
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &AdamState, theta: &[f64], gradient: &[f64]) -> (Vec<f64>, AdamState) {
    let mut next = state.clone();
    let mut theta = theta.to_vec();
    next.step(&mut theta, gradient);
    (theta, next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule() {
        let c = AdamConfig::default();
        assert_eq!(c.lr_at(0), 0.25);
        assert!((c.lr_at(9) - 0.2).abs() < 1e-15);
        assert_eq!(c.lr_at(45), 0.0);
        assert_eq!(c.lr_at(100), 0.0);
        assert_eq!(AdamConfig::constant(0.1).lr_at(1000), 0.1);
    }

    #[test]
    fn first_step_is_sign_step() {
        let state = AdamState::new(AdamConfig::default(), 2);
        let (theta, next) = adam_step(&state, &[-2.5, 0.0], &[-26.25, -23.75]);
        assert!(
            (theta[0] + 2.25).abs() < 1e-9 && (theta[1] - 0.25).abs() < 1e-9,
            "{theta:?}"
        );
        assert_eq!(next.step_count, 1);
    }

    #[test]
    fn zero_gradient_never_moves() {
        let mut state = AdamState::new(AdamConfig::default(), 3);
        let mut theta = vec![1.0, -2.0, 0.5];
        for _ in 0..20 {
            state.step(&mut theta, &[0.0; 3]);
        }
        assert_eq!(theta, vec![1.0, -2.0, 0.5]);
        assert!(state.v.iter().all(|&v| v == 0.0));
    }
}
