//! Adam and the plateau learning-rate schedule.

use crate::lstm::LstmWeights;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, flat in parameter file order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of steps taken so far.
    pub step: u64,
}

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        Self {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(weights: &mut LstmWeights, grads: &LstmWeights, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let grads = grads.params();
    let mut idx = 0;
    for (p, g) in weights.params_mut().into_iter().zip(grads) {
        for (w, &g) in p.iter_mut().zip(g) {
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            idx += 1;
        }
    }
}

/// What to do after an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub improved: bool,
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub stop: bool,
}

/// Halves the learning rate after `halving_patience` epochs without
/// improvement and stops after `stop_patience`. An epoch improves when its
/// loss beats the best so far by more than `min_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub best: f64,
    pub halving_patience: usize,
    pub stop_patience: usize,
    pub min_delta: f64,
    since_best: usize,
    since_halving: usize,
}

impl PlateauSchedule {
    pub fn new(lr0: f64, halving_patience: usize, stop_patience: usize, min_delta: f64) -> Self {
        Self {
            lr: lr0,
            best: f64::INFINITY,
            halving_patience,
            stop_patience,
            min_delta,
            since_best: 0,
            since_halving: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> Decision {
        let improved = loss < self.best - self.min_delta;
        if improved {
            self.best = loss;
            self.since_best = 0;
            self.since_halving = 0;
        } else {
            self.since_best += 1;
            self.since_halving += 1;
            if self.halving_patience > 0 && self.since_halving >= self.halving_patience {
                self.lr /= 2.0;
                self.since_halving = 0;
            }
        }
        Decision {
            improved,
            lr: self.lr,
            stop: self.since_best >= self.stop_patience,
        }
    }
}
