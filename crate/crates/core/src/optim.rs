//! Adam with a parameter mask, and the warmup + cosine learning-rate
//! schedule used by both trainers.

use std::f64::consts::PI;
use std::ops::Range;

use crate::scorer::Scorer;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Scorer,
    /// Whole-corpus loss before training, then after each epoch.
    pub loss_trace: Vec<f64>,
    pub steps: usize,
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).ceil() as usize;
        Self {
            base_lr,
            warmup_steps: warmup_steps.min(total_steps),
            total_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps);
        if decay == 0 {
            return self.base_lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    /// One descent step on the parameters inside `ranges`; everything else
    /// is left untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, ranges: &[Range<usize>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for range in ranges {
            for i in range.clone() {
                let g = grad[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let update = lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
                params[i] -= update;
            }
        }
    }
}
