//! Optimizers (decoupled-decay AdamW, classic SGD with momentum) and the
//! cosine learning-rate schedule. One `ParamState` per parameter tensor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    SgdMomentum,
}

/// Hyperparameters shared by every parameter tensor of a run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub kind: OptimizerKind,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
    pub momentum: f32,
}

impl OptimizerHyper {
    pub fn adamw(weight_decay: f32) -> Self {
        OptimizerHyper {
            kind: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay,
            momentum: 0.0,
        }
    }

    pub fn sgd_momentum(momentum: f32, weight_decay: f32) -> Self {
        OptimizerHyper {
            kind: OptimizerKind::SgdMomentum,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            weight_decay,
            momentum,
        }
    }
}

/// Moment buffers and step count for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamState {
    pub hyper: OptimizerHyper,
    /// First moment (AdamW) or momentum buffer (SGD).
    pub m: Vec<f32>,
    /// Second moment; unused by SGD.
    pub v: Vec<f32>,
    pub step: u64,
}

impl ParamState {
    pub fn new(hyper: OptimizerHyper, len: usize) -> Self {
        let v_len = match hyper.kind {
            OptimizerKind::AdamW => len,
            OptimizerKind::SgdMomentum => 0,
        };
        ParamState {
            hyper,
            m: vec![0.0; len],
            v: vec![0.0; v_len],
            step: 0,
        }
    }

    /// Applies one update in place. Dispatches on the configured kind.
    pub fn apply(&mut self, params: &mut [f32], grads: &[f32], lr: f32) {
        match self.hyper.kind {
            OptimizerKind::AdamW => adamw_step(params, grads, self, lr),
            OptimizerKind::SgdMomentum => sgd_momentum_step(params, grads, self, lr),
        }
    }
}

/// Decoupled weight-decay AdamW with bias correction.
pub fn adamw_step(params: &mut [f32], grads: &[f32], state: &mut ParamState, lr: f32) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.m.len());
    let h = state.hyper;
    state.step += 1;
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * h.weight_decay * params[i];
        params[i] -= lr * m_hat / (v_hat.sqrt() + h.epsilon);
    }
}

/// Classic momentum: `v <- mu*v + (g + wd*theta)`, `theta <- theta - lr*v`.
pub fn sgd_momentum_step(params: &mut [f32], grads: &[f32], state: &mut ParamState, lr: f32) {
    debug_assert_eq!(params.len(), grads.len());
    let h = state.hyper;
    state.step += 1;
    for i in 0..params.len() {
        let g = grads[i] + h.weight_decay * params[i];
        state.m[i] = h.momentum * state.m[i] + g;
        params[i] -= lr * state.m[i];
    }
}

/// Cosine annealing from `lr_max` (step 0) down to `lr_min` (final step).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
}

impl Schedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if !(lr_min <= lr_max && lr_min > 0.0) {
            return Err(Error::config(format!(
                "schedule requires 0 < lr_min <= lr_max, got {lr_min} / {lr_max}"
            )));
        }
        if total_steps == 0 {
            return Err(Error::config("schedule requires total_steps >= 1"));
        }
        Ok(Schedule {
            lr_max,
            lr_min,
            total_steps,
        })
    }
}

pub fn cosine_lr(schedule: &Schedule, step: u64) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::usage(format!(
            "schedule step {step} beyond total {}",
            schedule.total_steps
        )));
    }
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(schedule.lr_min
        + 0.5 * (schedule.lr_max - schedule.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};

    fn random_vec(n: usize, seed: u64) -> Vec<f32> {
        let mut rng = rng_from_seed(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_fixed_point() {
        let mut params = random_vec(16, 1);
        let before = params.clone();
        let mut state = ParamState::new(OptimizerHyper::adamw(0.0), 16);
        let grads = vec![0.0; 16];
        for _ in 0..5 {
            adamw_step(&mut params, &grads, &mut state, 0.1);
        }
        assert_eq!(params, before);
    }

    #[test]
    fn adamw_pure_decay_scales_params() {
        let mut params = random_vec(8, 2);
        let before = params.clone();
        let mut state = ParamState::new(OptimizerHyper::adamw(0.01), 8);
        let grads = vec![0.0; 8];
        adamw_step(&mut params, &grads, &mut state, 0.5);
        for (p, b) in params.iter().zip(&before) {
            assert!((p - b * (1.0 - 0.5 * 0.01)).abs() <= 1e-7);
        }
    }

    #[test]
    fn adamw_matches_reference_update() {
        // Independent step-by-step scalar reference, same precision.
        let n = 32;
        let mut params = random_vec(n, 3);
        let hyper = OptimizerHyper::adamw(0.004);
        let mut state = ParamState::new(hyper, n);

        let mut ref_p = params.clone();
        let mut ref_m = vec![0.0f32; n];
        let mut ref_v = vec![0.0f32; n];
        let (b1, b2, eps, wd) = (0.9f32, 0.999f32, 1e-8f32, 0.004f32);

        for step in 1..=7u64 {
            let grads = random_vec(n, 100 + step);
            let lr = 0.02f32;
            adamw_step(&mut params, &grads, &mut state, lr);
            for i in 0..n {
                let g = grads[i];
                ref_m[i] = b1 * ref_m[i] + (1.0 - b1) * g;
                ref_v[i] = b2 * ref_v[i] + (1.0 - b2) * g * g;
                let m_hat = ref_m[i] / (1.0 - b1.powi(step as i32));
                let v_hat = ref_v[i] / (1.0 - b2.powi(step as i32));
                ref_p[i] -= lr * wd * ref_p[i];
                ref_p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        for (p, r) in params.iter().zip(&ref_p) {
            assert!((p - r).abs() <= 1e-7 * r.abs().max(1.0), "{p} vs {r}");
        }
    }

    #[test]
    fn sgd_degenerates_to_gradient_descent() {
        let mut params = vec![1.0f32, -2.0, 0.5];
        let grads = vec![0.5f32, 0.5, 0.5];
        let mut state = ParamState::new(OptimizerHyper::sgd_momentum(0.0, 0.0), 3);
        sgd_momentum_step(&mut params, &grads, &mut state, 0.1);
        assert_eq!(params, vec![1.0 - 0.05, -2.0 - 0.05, 0.5 - 0.05]);
    }

    #[test]
    fn sgd_buffer_decays_geometrically() {
        let mut params = vec![0.0f32; 4];
        let mut state = ParamState::new(OptimizerHyper::sgd_momentum(0.9, 0.0), 4);
        sgd_momentum_step(&mut params, &[1.0; 4], &mut state, 0.0);
        let after_one = state.m.clone();
        for _ in 0..3 {
            sgd_momentum_step(&mut params, &[0.0; 4], &mut state, 0.0);
        }
        for (m, one) in state.m.iter().zip(&after_one) {
            assert!((m - one * 0.9f32.powi(3)).abs() <= 1e-7);
        }
    }

    #[test]
    fn sgd_matches_reference_update() {
        let n = 16;
        let mut params = random_vec(n, 4);
        let mut state = ParamState::new(OptimizerHyper::sgd_momentum(0.9, 0.0001), n);
        let mut ref_p: Vec<f64> = params.iter().map(|&x| x as f64).collect();
        let mut ref_v = vec![0.0f64; n];
        for step in 0..5u64 {
            let grads = random_vec(n, 200 + step);
            sgd_momentum_step(&mut params, &grads, &mut state, 0.05);
            for i in 0..n {
                let g = grads[i] as f64 + 0.0001 * ref_p[i];
                ref_v[i] = 0.9 * ref_v[i] + g;
                ref_p[i] -= 0.05 * ref_v[i];
            }
        }
        for (p, r) in params.iter().zip(&ref_p) {
            assert!((*p as f64 - r).abs() <= 1e-7 * r.abs().max(1.0));
        }
    }

    #[test]
    fn cosine_boundaries_and_midpoint() {
        let s = Schedule::new(2e-4, 1e-5, 100).unwrap();
        assert_eq!(cosine_lr(&s, 0).unwrap(), 2e-4);
        let end = cosine_lr(&s, 100).unwrap();
        assert!((end - 1e-5).abs() <= 1e-18);
        let mid = cosine_lr(&s, 50).unwrap();
        assert!((mid - (2e-4 + 1e-5) / 2.0).abs() <= 1e-12);
        assert!(cosine_lr(&s, 101).is_err());
    }

    #[test]
    fn cosine_is_non_increasing() {
        let s = Schedule::new(0.1, 0.001, 37).unwrap();
        let mut prev = f64::INFINITY;
        for step in 0..=37 {
            let lr = cosine_lr(&s, step).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
